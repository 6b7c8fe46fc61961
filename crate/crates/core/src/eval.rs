//! Metrics, composite fields, uncertainty maps and the penetration-rate sweep.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asm::{asm_estimate, AsmParams};
use crate::error::{Error, Result};
use crate::grid::{
    aggregate_to_grid, field_to_observations, format_float, sample_penetration, CoordinateUnits,
    ObservationSet, SpatioTemporalGrid, SpeedField, TrajectoryPoint,
};
use crate::kernels::{Coregionalization, KernelFamily, KernelSpec};
use crate::multilane::predict_grid;
use crate::vsgp::{default_init, fit, fit_pretrained, FitConfig, TrainedModel};

/// Observed cells take the observed value, all others the estimate.
pub fn composite_field(estimate: &SpeedField, observed: &SpeedField) -> Result<SpeedField> {
    if !estimate.grid.same_shape(&observed.grid) {
        return Err(Error::GridMismatch("estimate and observed grids differ".into()));
    }
    let mut values = Vec::with_capacity(estimate.values.len());
    for (k, (e, o)) in estimate.values.iter().zip(&observed.values).enumerate() {
        match o.or(*e) {
            Some(v) => values.push(Some(v)),
            None => {
                let (lane, space, time) = estimate.grid.unindex(k);
                return Err(Error::IncompleteEstimate { lane, space, time });
            }
        }
    }
    Ok(SpeedField {
        grid: estimate.grid,
        values,
        counts: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Cells that entered the averages.
    pub evaluated: usize,
    /// Cells skipped because the truth is missing there.
    pub excluded: usize,
}

/// MAE and RMSE over cells where the truth is present and `mask` (if given)
/// is set.
pub fn field_metrics(truth: &SpeedField, est: &SpeedField, mask: Option<&[bool]>) -> Result<Metrics> {
    if !truth.grid.same_shape(&est.grid) {
        return Err(Error::GridMismatch("truth and estimate grids differ".into()));
    }
    let (mut abs, mut sq, mut n, mut excluded) = (0.0, 0.0, 0usize, 0usize);
    for (k, (t, e)) in truth.values.iter().zip(&est.values).enumerate() {
        if mask.is_some_and(|m| !m[k]) {
            continue;
        }
        let Some(t) = t else {
            excluded += 1;
            continue;
        };
        let Some(e) = e else {
            let (lane, space, time) = est.grid.unindex(k);
            return Err(Error::IncompleteEstimate { lane, space, time });
        };
        let d = e - t;
        abs += d.abs();
        sq += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::NothingToEvaluate);
    }
    Ok(Metrics {
        mae: abs / n as f64,
        rmse: (sq / n as f64).sqrt(),
        evaluated: n,
        excluded,
    })
}

pub fn rmse(truth: &SpeedField, est: &SpeedField) -> Result<f64> {
    field_metrics(truth, est, None).map(|m| m.rmse)
}

pub fn mae(truth: &SpeedField, est: &SpeedField) -> Result<f64> {
    field_metrics(truth, est, None).map(|m| m.mae)
}

/// `k` times the predictive standard deviation (observation space) per cell.
pub fn uncertainty_field(model: &TrainedModel, grid: &SpatioTemporalGrid, k: f64) -> Result<SpeedField> {
    let pred = predict_grid(model, grid, true)?;
    Ok(SpeedField::dense(
        *grid,
        pred.variance.values.iter().map(|v| k * v.unwrap_or(0.0).sqrt()).collect(),
    ))
}

/// Wave speed (km/h, negative upstream) of a kernel angle measured in cell
/// units of size `ds` x `dt`.
pub fn wave_speed_from_angle(angle: f64, ds: f64, dt: f64) -> Result<f64> {
    let tan = angle.tan();
    if tan.abs() < 1e-12 || !tan.is_finite() {
        return Err(Error::InfiniteWaveSpeed(angle));
    }
    Ok(-3.6 * (ds / dt) / tan)
}

/// Writes per-lane `S x T` matrices (rows are space cells, no header) for the
/// estimate and, when given, the signed and absolute residual against the
/// truth and an uncertainty field. Missing cells are left empty.
pub fn write_heatmaps(
    dir: &Path,
    estimate: &SpeedField,
    truth: Option<&SpeedField>,
    uncertainty: Option<&SpeedField>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let grid = estimate.grid;
    let mut written = Vec::new();
    let mut emit = |name: &str, lane: u32, cell: &dyn Fn(usize, usize) -> Option<f64>| -> Result<()> {
        let path = dir.join(format!("{name}_lane{lane}.csv"));
        let file = File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        for i in 0..grid.n_space {
            let row: Vec<String> = (0..grid.n_time)
                .map(|j| cell(i, j).map(format_float).unwrap_or_default())
                .collect();
            writeln!(w, "{}", row.join(",")).map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
        written.push(path);
        Ok(())
    };
    for lane in 1..=grid.n_lanes as u32 {
        emit("estimate", lane, &|i, j| estimate.get(lane, i, j))?;
        if let Some(truth) = truth {
            let resid = |i, j| Some(estimate.get(lane, i, j)? - truth.get(lane, i, j)?);
            emit("residual", lane, &resid)?;
            emit("abs_residual", lane, &|i, j| resid(i, j).map(f64::abs))?;
        }
        if let Some(u) = uncertainty {
            emit("uncertainty", lane, &|i, j| u.get(lane, i, j))?;
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "asm")]
    Asm,
    #[serde(rename = "gp-ard")]
    GpArd,
    #[serde(rename = "gp-rotated")]
    GpRotated,
    #[serde(rename = "p-gp-rotated")]
    PGpRotated,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Asm => "asm",
            Method::GpArd => "gp-ard",
            Method::GpRotated => "gp-rotated",
            Method::PGpRotated => "p-gp-rotated",
        }
    }
}

/// Fixed hyperparameters for the pretrained method: inline or a model/spec
/// JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Pretrained {
    Spec(KernelSpec),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Method used by the stand-alone fit command.
    pub method: Method,
    pub family: KernelFamily,
    pub units: CoordinateUnits,
    pub fit: FitConfig,
    /// Coregionalization rank for multi-lane grids (defaults to the number of lanes).
    pub rank: Option<usize>,
    /// Starting hyperparameters; data-scaled defaults when absent.
    pub init: Option<KernelSpec>,
    pub pretrained: Option<Pretrained>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            method: Method::GpRotated,
            family: KernelFamily::Matern52,
            units: CoordinateUnits::Cells,
            fit: FitConfig::default(),
            rank: None,
            init: None,
            pretrained: None,
        }
    }
}

impl ModelConfig {
    /// Starting spec for `train` on `grid`.
    pub fn initial_spec(&self, train: &ObservationSet, grid: &SpatioTemporalGrid) -> KernelSpec {
        let mut spec = self
            .init
            .clone()
            .unwrap_or_else(|| default_init(train, grid, self.family, self.fit.mean));
        if grid.n_lanes > 1 && spec.coregionalization.is_none() {
            spec.coregionalization = Some(Coregionalization::identity(grid.n_lanes, self.rank.unwrap_or(grid.n_lanes)));
        }
        if grid.n_lanes == 1 {
            spec.coregionalization = None;
        }
        spec
    }

    /// Fits (or, for the pretrained method, only conditions) a GP model.
    pub fn train(&self, method: Method, obs: &ObservationSet, grid: &SpatioTemporalGrid, seed: u64) -> Result<TrainedModel> {
        match method {
            Method::Asm => Err(Error::Other("asm is not a GP method".into())),
            Method::GpArd | Method::GpRotated => {
                let mut init = self.initial_spec(obs, grid);
                let config = FitConfig {
                    optimize_angle: method == Method::GpRotated,
                    ..self.fit.clone()
                };
                if method == Method::GpArd {
                    init.angle = 0.0;
                }
                fit(obs, grid, &config, &init, seed)
            }
            Method::PGpRotated => match &self.pretrained {
                Some(Pretrained::Spec(spec)) => fit_pretrained(obs, grid, spec, self.fit.mean, seed),
                Some(Pretrained::Path(p)) => Err(Error::Other(format!(
                    "pretrained spec {} was not loaded",
                    p.display()
                ))),
                None => Err(Error::Other("p-gp-rotated needs model.pretrained".into())),
            },
        }
    }
}

/// Which cells enter the metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricScope {
    /// Composite field over all cells.
    #[default]
    Composite,
    /// Only cells without training observations.
    Unobserved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub rates: Vec<f64>,
    /// Number of repetitions; repetition `k` uses seed `base_seed + k`.
    pub seeds: usize,
    /// Set from the run seed rather than the sweep block.
    #[serde(skip)]
    pub base_seed: u64,
    pub metric_scope: MetricScope,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Asm, Method::GpArd, Method::GpRotated],
            rates: vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5],
            seeds: 10,
            base_seed: 0,
            metric_scope: MetricScope::Composite,
        }
    }
}

/// Trajectories with their ground-truth field (normally the aggregate of all
/// vehicles).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub points: Vec<TrajectoryPoint>,
    pub grid: SpatioTemporalGrid,
    pub truth: SpeedField,
}

impl Dataset {
    pub fn new(points: Vec<TrajectoryPoint>, grid: SpatioTemporalGrid) -> Self {
        let truth = aggregate_to_grid(&points, &grid);
        Self { points, grid, truth }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub rate: f64,
    pub seed: u64,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub evaluated: usize,
    pub status: String,
    #[serde(skip)]
    pub fit_seconds: f64,
    #[serde(skip)]
    pub predict_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub method: Method,
    pub rate: f64,
    pub runs: usize,
    pub failed: usize,
    pub mae_mean: Option<f64>,
    pub mae_std: Option<f64>,
    pub rmse_mean: Option<f64>,
    pub rmse_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub runs: Vec<RunRecord>,
    pub groups: Vec<GroupSummary>,
    pub provenance: serde_json::Value,
}

/// Mean and sample standard deviation (n - 1).
fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

impl ExperimentReport {
    pub fn from_runs(runs: Vec<RunRecord>, provenance: serde_json::Value) -> Self {
        let mut by_group: BTreeMap<(Method, u64), Vec<&RunRecord>> = BTreeMap::new();
        for r in &runs {
            by_group.entry((r.method, r.rate.to_bits())).or_default().push(r);
        }
        let groups = by_group
            .into_values()
            .map(|rs| {
                let ok: Vec<&&RunRecord> = rs.iter().filter(|r| r.mae.is_some()).collect();
                let maes: Vec<f64> = ok.iter().filter_map(|r| r.mae).collect();
                let rmses: Vec<f64> = ok.iter().filter_map(|r| r.rmse).collect();
                let (mae_mean, mae_std) = mean_std(&maes);
                let (rmse_mean, rmse_std) = mean_std(&rmses);
                GroupSummary {
                    method: rs[0].method,
                    rate: rs[0].rate,
                    runs: rs.len(),
                    failed: rs.len() - ok.len(),
                    mae_mean,
                    mae_std,
                    rmse_mean,
                    rmse_std,
                }
            })
            .collect();
        Self {
            runs,
            groups,
            provenance,
        }
    }

    pub fn group(&self, method: Method, rate: f64) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.method == method && g.rate == rate)
    }

    /// `method,rate,seed,mae,rmse,fit_seconds,predict_seconds,status`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "rate", "seed", "mae", "rmse", "fit_seconds", "predict_seconds", "status"])?;
        let opt = |v: Option<f64>| v.map(format_float).unwrap_or_default();
        for r in &self.runs {
            w.write_record([
                r.method.name().to_string(),
                format_float(r.rate),
                r.seed.to_string(),
                opt(r.mae),
                opt(r.rmse),
                format_float(r.fit_seconds),
                format_float(r.predict_seconds),
                r.status.clone(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("writing report", e))?;
        Ok(())
    }

    /// Aggregates, per-run metrics and provenance; free of timing.
    pub fn to_json(&self) -> Result<String> {
        let doc = serde_json::json!({
            "groups": self.groups,
            "runs": self.runs,
            "provenance": self.provenance,
        });
        Ok(serde_json::to_string_pretty(&doc)? + "\n")
    }

    /// Wall-clock timings per run and per group mean.
    pub fn timing_json(&self) -> Result<String> {
        let runs: Vec<_> = self
            .runs
            .iter()
            .map(|r| {
                serde_json::json!({
                    "method": r.method, "rate": r.rate, "seed": r.seed,
                    "fit_seconds": r.fit_seconds, "predict_seconds": r.predict_seconds,
                })
            })
            .collect();
        let mut groups: BTreeMap<(Method, u64), (f64, f64, usize)> = BTreeMap::new();
        for r in &self.runs {
            let e = groups.entry((r.method, r.rate.to_bits())).or_default();
            e.0 += r.fit_seconds;
            e.1 += r.predict_seconds;
            e.2 += 1;
        }
        let groups: Vec<_> = groups
            .into_iter()
            .map(|((m, rate), (f, p, n))| {
                serde_json::json!({
                    "method": m, "rate": f64::from_bits(rate),
                    "fit_seconds_mean": f / n as f64, "predict_seconds_mean": p / n as f64,
                })
            })
            .collect();
        Ok(serde_json::to_string_pretty(&serde_json::json!({ "runs": runs, "groups": groups }))? + "\n")
    }
}

/// Output of one (method, rate, seed) estimation.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub observed: SpeedField,
    pub estimate: SpeedField,
    pub composite: SpeedField,
    pub model: Option<TrainedModel>,
    pub metrics: Metrics,
    pub fit_seconds: f64,
    pub predict_seconds: f64,
}

/// Samples probe vehicles, estimates the full field and scores it.
pub fn run_single(
    data: &Dataset,
    method: Method,
    rate: f64,
    seed: u64,
    model: &ModelConfig,
    asm: &AsmParams,
    scope: MetricScope,
) -> Result<RunOutput> {
    let (probes, _) = sample_penetration(&data.points, rate, seed)?;
    let observed = aggregate_to_grid(&probes, &data.grid);
    let obs = field_to_observations(&observed, None, model.units)?;
    let start = Instant::now();
    let (estimate, trained, fit_seconds, predict_seconds) = match method {
        Method::Asm => {
            let est = asm_estimate(&obs, &data.grid, asm)?;
            if est.fallback_count() > 0 {
                warn!("asm fell back to the global mean in {} cells", est.fallback_count());
            }
            (est.field, None, 0.0, start.elapsed().as_secs_f64())
        }
        _ => {
            let trained = model.train(method, &obs, &data.grid, seed)?;
            let fit_seconds = start.elapsed().as_secs_f64();
            let start = Instant::now();
            let pred = predict_grid(&trained, &data.grid, true)?;
            (pred.estimate, Some(trained), fit_seconds, start.elapsed().as_secs_f64())
        }
    };
    let composite = composite_field(&estimate, &observed)?;
    let mask: Option<Vec<bool>> = match scope {
        MetricScope::Composite => None,
        MetricScope::Unobserved => Some(observed.values.iter().map(Option::is_none).collect()),
    };
    let metrics = field_metrics(&data.truth, &composite, mask.as_deref())?;
    Ok(RunOutput {
        observed,
        estimate,
        composite,
        model: trained,
        metrics,
        fit_seconds,
        predict_seconds,
    })
}

/// Runs every (method, rate, seed) combination on a bounded pool. Failed
/// runs are recorded, not fatal.
pub fn run_sweep(
    data: &Dataset,
    sweep: &SweepConfig,
    model: &ModelConfig,
    asm: &AsmParams,
    threads: Option<usize>,
    provenance: serde_json::Value,
) -> Result<ExperimentReport> {
    for &r in &sweep.rates {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::InvalidRate(r));
        }
    }
    let mut jobs = Vec::new();
    for &method in &sweep.methods {
        for &rate in &sweep.rates {
            for k in 0..sweep.seeds {
                jobs.push((method, rate, sweep.base_seed + k as u64));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Other(e.to_string()))?;
    let runs: Vec<RunRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(method, rate, seed)| {
                let out = run_single(data, method, rate, seed, model, asm, sweep.metric_scope);
                let record = match out {
                    Ok(o) => RunRecord {
                        method,
                        rate,
                        seed,
                        mae: Some(o.metrics.mae),
                        rmse: Some(o.metrics.rmse),
                        evaluated: o.metrics.evaluated,
                        status: "ok".into(),
                        fit_seconds: o.fit_seconds,
                        predict_seconds: o.predict_seconds,
                    },
                    Err(e) => {
                        warn!("{} rate {rate} seed {seed} failed: {e}", method.name());
                        RunRecord {
                            method,
                            rate,
                            seed,
                            mae: None,
                            rmse: None,
                            evaluated: 0,
                            status: format!("failed: {e}"),
                            fit_seconds: 0.0,
                            predict_seconds: 0.0,
                        }
                    }
                };
                info!("{} rate {rate} seed {seed}: {}", method.name(), record.status);
                record
            })
            .collect()
    });
    Ok(ExperimentReport::from_runs(runs, provenance))
}
