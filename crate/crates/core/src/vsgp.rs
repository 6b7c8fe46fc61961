//! Variational sparse GP with the collapsed (Titsias) evidence lower bound.
//!
//! Notation used in comments: `P = K_mn`, `K = K_mm + jitter`, `noise` is the
//! observation noise variance and `beta = 1/noise`. The bound is evaluated in
//! `O(n m^2)` through `A = L^-1 P / sqrt(noise)` and `B = I + A A^T`.

use std::f64::consts::PI;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gp_exact::{MeanMode, Posterior, PredictOptions};
use crate::grid::{CoordinateUnits, ObservationSet, SpatioTemporalGrid};
use crate::kernels::{Coregionalization, Input, Kernel, KernelFamily, KernelSpec};
use crate::linalg::{factor_with_jitter, solve_lower, solve_lower_transpose};

/// Smallest accepted squared Cholesky pivot of `K_mm` (relative to the signal
/// variance) before jitter is added.
const KMM_MIN_PIVOT: f64 = 1e-6;

/// Query batch size for diagonal-only prediction.
const PREDICT_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct InducingSet {
    pub points: Vec<Input>,
}

impl InducingSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `max(1, min(ceil(0.02 n), 500))`.
pub fn inducing_count(n: usize) -> usize {
    ((2 * n).div_ceil(100)).clamp(1, 500)
}

pub fn init_inducing(grid: &SpatioTemporalGrid, n: usize, seed: u64) -> InducingSet {
    init_inducing_with_units(grid, n, seed, CoordinateUnits::Cells)
}

/// Uniform random locations over the grid domain, single output.
pub fn init_inducing_with_units(grid: &SpatioTemporalGrid, n: usize, seed: u64, units: CoordinateUnits) -> InducingSet {
    let m = inducing_count(n);
    let [smax, tmax] = grid.extent(units);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..m)
        .map(|_| Input::at(rng.random_range(0.0..smax), rng.random_range(0.0..tmax)))
        .collect();
    InducingSet { points }
}

/// Inducing points in the extended (location, lane) space. The total count
/// follows [`inducing_count`] and is split across lanes in proportion to
/// their observation counts (largest remainder).
pub fn init_inducing_multi(
    grid: &SpatioTemporalGrid,
    lane_counts: &[usize],
    seed: u64,
    units: CoordinateUnits,
) -> InducingSet {
    let n: usize = lane_counts.iter().sum();
    let m = inducing_count(n).max(lane_counts.iter().filter(|&&c| c > 0).count());
    let mut alloc: Vec<usize> = lane_counts.iter().map(|&c| m * c / n.max(1)).collect();
    let mut rema: Vec<(usize, usize)> = lane_counts
        .iter()
        .enumerate()
        .map(|(l, &c)| ((m * c) % n.max(1), l))
        .collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut short = m - alloc.iter().sum::<usize>();
    for &(_, l) in &rema {
        if short == 0 {
            break;
        }
        if lane_counts[l] > 0 {
            alloc[l] += 1;
            short -= 1;
        }
    }
    // every observed lane gets at least one inducing point
    for l in 0..alloc.len() {
        if lane_counts[l] > 0 && alloc[l] == 0 {
            let donor = (0..alloc.len()).max_by_key(|&k| alloc[k]).unwrap();
            alloc[donor] -= 1;
            alloc[l] += 1;
        }
    }
    let [smax, tmax] = grid.extent(units);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(m);
    for (l, &k) in alloc.iter().enumerate() {
        for _ in 0..k {
            points.push(Input::new(
                [rng.random_range(0.0..smax), rng.random_range(0.0..tmax)],
                l as u32 + 1,
            ));
        }
    }
    InducingSet { points }
}

/// Gradient of the bound with respect to every free parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradient {
    pub log_variance: f64,
    pub log_lengthscale_s: f64,
    pub log_lengthscale_t: f64,
    pub angle: f64,
    pub log_noise_variance: f64,
    pub inducing: Vec<[f64; 2]>,
    pub coregionalization: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Elbo {
    pub value: f64,
    /// `-tr(K_nn - Q_nn) / (2 noise)`, never positive.
    pub trace_term: f64,
    pub jitter: f64,
    pub gradient: ElboGradient,
}

/// Evidence lower bound of a zero-mean sparse GP and its gradient.
pub fn elbo(spec: &KernelSpec, inducing: &InducingSet, train: &ObservationSet) -> Result<Elbo> {
    if train.is_empty() {
        return Err(Error::EmptyObservations);
    }
    if inducing.is_empty() {
        return Err(Error::Other("inducing set is empty".into()));
    }
    let kernel = spec.evaluator()?;
    let x = train.inputs();
    kernel.check_inputs(&x)?;
    kernel.check_inputs(&inducing.points)?;
    let y = DVector::from_column_slice(&train.y);
    elbo_inner(&kernel, spec, &inducing.points, &x, &y)
}

fn elbo_inner(kernel: &Kernel, spec: &KernelSpec, z: &[Input], x: &[Input], y: &DVector<f64>) -> Result<Elbo> {
    let n = x.len();
    let m = z.len();
    let noise = spec.noise_variance;
    let beta = 1.0 / noise;

    let kmm = kernel.gram_sym(z);
    let fm = factor_with_jitter(&kmm, spec.variance, KMM_MIN_PIVOT)?;
    let lm = fm.l();
    let p = kernel.gram(z, x);
    let kdiag: Vec<f64> = x.iter().map(|xi| kernel.diag(xi)).collect();
    let kdiag_sum: f64 = kdiag.iter().sum();

    let lp = solve_lower(&lm, &p); // L^-1 P
    let a = &lp * beta.sqrt();
    let aat = &a * a.transpose();
    let mut bmat = aat.clone();
    for i in 0..m {
        bmat[(i, i)] += 1.0;
    }
    let lb = bmat.clone().cholesky().ok_or(Error::Conditioning { jitter: fm.jitter })?;
    let lb_l = lb.l();
    let ay = &a * y;
    let c = lb_l.solve_lower_triangular(&ay).expect("B factor") * beta.sqrt();
    let yy = y.norm_squared();
    let tr_aat = aat.trace();
    let log_det_b = 2.0 * lb_l.diagonal().iter().map(|d| d.ln()).sum::<f64>();

    let trace_term = -0.5 * (beta * kdiag_sum - tr_aat);
    let value = -0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * log_det_b - 0.5 * n as f64 * noise.ln() - 0.5 * beta * yy
        + 0.5 * c.norm_squared()
        + trace_term;

    // Matrix derivatives with K, P, kdiag and beta treated as independent.
    let eye = DMatrix::<f64>::identity(m, m);
    let l_inv = solve_lower(&lm, &eye);
    let k_inv = l_inv.transpose() * &l_inv;
    let b_inv = lb.inverse();
    let m_inv = l_inv.transpose() * &b_inv * &l_inv;
    let b_vec = &p * y;
    let u = &m_inv * &b_vec;
    let g_m = &m_inv * -0.5 - (&u * u.transpose()) * (0.5 * beta * beta);
    let v = &k_inv * &p;
    let g_k = &g_m + &k_inv * 0.5 - (&v * v.transpose()) * (0.5 * beta);
    let g_mp = &g_m * &p;
    let g_p = &g_mp * (2.0 * beta) + (&u * y.transpose()) * (beta * beta) + &v * beta;
    let ppt = &p * p.transpose();
    let d_beta = g_m.component_mul(&ppt).sum() + 0.5 * n as f64 / beta - 0.5 * yy + beta * u.dot(&b_vec)
        - 0.5 * kdiag_sum
        + 0.5 * k_inv.component_mul(&ppt).sum();

    let from_kmm = kernel.contract(&g_k, z, z);
    let from_kmn = kernel.contract(&g_p, z, x);
    let diag_w = vec![-0.5 * beta; n];
    let (diag_var, diag_a) = kernel.contract_diag(&diag_w, x);

    let inducing = (0..m)
        .map(|i| {
            [
                from_kmm.xa[i][0] + from_kmm.xb[i][0] + from_kmn.xa[i][0],
                from_kmm.xa[i][1] + from_kmm.xb[i][1] + from_kmn.xa[i][1],
            ]
        })
        .collect();
    let coregionalization = from_kmm
        .a
        .iter()
        .zip(&from_kmn.a)
        .zip(&diag_a)
        .map(|((a, b), c)| a + b + c)
        .collect();
    // jitter is proportional to the signal variance
    let jitter_term = fm.jitter * g_k.trace();
    let gradient = ElboGradient {
        log_variance: from_kmm.log_variance + from_kmn.log_variance + diag_var + jitter_term,
        log_lengthscale_s: from_kmm.log_lengthscale_s + from_kmn.log_lengthscale_s,
        log_lengthscale_t: from_kmm.log_lengthscale_t + from_kmn.log_lengthscale_t,
        angle: from_kmm.angle + from_kmn.angle,
        log_noise_variance: -beta * d_beta,
        inducing,
        coregionalization,
    };
    Ok(Elbo {
        value,
        trace_term,
        jitter: fm.jitter,
        gradient,
    })
}

/// Optimizer and model options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Relative ELBO improvement below which the run counts as converged.
    pub tolerance: f64,
    /// Window (iterations) over which `tolerance` is measured.
    pub patience: usize,
    pub mean: MeanMode,
    /// `false` keeps the angle fixed (plain ARD kernel when it is zero).
    pub optimize_angle: bool,
    pub optimize_inducing: bool,
    pub optimize_coregionalization: bool,
    /// Initial step for log-parameters and the angle.
    pub initial_step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            tolerance: 1e-7,
            patience: 20,
            mean: MeanMode::Zero,
            optimize_angle: true,
            optimize_inducing: true,
            optimize_coregionalization: true,
            initial_step: 0.05,
        }
    }
}

/// Data-scaled starting point: `variance = var(y)`, lengthscales a tenth of
/// the grid extent, `angle = 0`, `noise = 0.1 var(y)`.
pub fn default_init(
    train: &ObservationSet,
    grid: &SpatioTemporalGrid,
    family: KernelFamily,
    mean: MeanMode,
) -> KernelSpec {
    let n = train.len().max(1) as f64;
    let mu = train.y.iter().sum::<f64>() / n;
    let mut var = train.y.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    if !(var.is_finite() && var > 0.0) {
        var = 1.0;
    }
    let _ = mean;
    let [smax, tmax] = grid.extent(train.units);
    let mut spec = KernelSpec::new(family, var, [smax / 10.0, tmax / 10.0], 0.0, 0.1 * var);
    let lanes = train.lane.iter().copied().max().unwrap_or(1) as usize;
    if lanes > 1 {
        spec.coregionalization = Some(Coregionalization::identity(lanes, lanes));
    }
    spec
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub iterations: usize,
    pub initial_elbo: Option<f64>,
    pub final_elbo: Option<f64>,
    pub seed: u64,
    pub converged: bool,
    pub optimized: bool,
    pub n_train: usize,
    pub data_digest: String,
    /// ELBO after every iteration.
    pub trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Optimized hyperparameters, inducing locations and the cached posterior
/// over inducing variables (`inducing_mean` and its precision).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub kernel: KernelSpec,
    pub inducing: InducingSet,
    pub mean_mode: MeanMode,
    pub mean_offset: f64,
    /// Absolute jitter on `K_mm` used to build the cache.
    pub jitter: f64,
    pub inducing_mean: Vec<f64>,
    pub precision: DMatrix<f64>,
    pub units: CoordinateUnits,
    pub grid: Option<SpatioTemporalGrid>,
    pub metadata: TrainingMetadata,
}

fn data_digest(train: &ObservationSet) -> String {
    let mut h = Sha256::new();
    for ((x, l), y) in train.x.iter().zip(&train.lane).zip(&train.y) {
        h.update(x[0].to_le_bytes());
        h.update(x[1].to_le_bytes());
        h.update(l.to_le_bytes());
        h.update(y.to_le_bytes());
    }
    hex::encode(h.finalize())
}

struct Cache {
    jitter: f64,
    inducing_mean: Vec<f64>,
    precision: DMatrix<f64>,
}

fn build_cache(kernel: &Kernel, spec: &KernelSpec, z: &[Input], x: &[Input], y: &DVector<f64>) -> Result<Cache> {
    let m = z.len();
    let fm = factor_with_jitter(&kernel.gram_sym(z), spec.variance, KMM_MIN_PIVOT)?;
    let lm = fm.l();
    let p = kernel.gram(z, x);
    let sqrt_beta = spec.noise_variance.recip().sqrt();
    let a = solve_lower(&lm, &p) * sqrt_beta;
    let mut bmat = &a * a.transpose();
    for i in 0..m {
        bmat[(i, i)] += 1.0;
    }
    let lb = bmat.clone().cholesky().ok_or(Error::Conditioning { jitter: fm.jitter })?;
    // mean = L B^-1 A y / sigma ; precision = L^-T B L^-1
    let ay = (&a * y) * sqrt_beta;
    let mean = &lm * lb.solve(&ay);
    let l_inv_b = solve_lower_transpose(&lm, &bmat);
    let precision = solve_lower_transpose(&lm, &l_inv_b.transpose());
    let precision = (&precision + precision.transpose()) * 0.5;
    Ok(Cache {
        jitter: fm.jitter,
        inducing_mean: mean.iter().copied().collect(),
        precision,
    })
}

/// Parameter vector layout: `[log var, log ls, log lt, angle, log noise, Z.., A..]`.
struct Layout {
    m: usize,
    n_a: usize,
    lanes: Vec<u32>,
    family: KernelFamily,
    rank: usize,
}

impl Layout {
    fn len(&self) -> usize {
        5 + 2 * self.m + self.n_a
    }

    fn pack(spec: &KernelSpec, z: &[Input]) -> (Self, Vec<f64>) {
        let mut v = vec![
            spec.variance.ln(),
            spec.lengthscale_s.ln(),
            spec.lengthscale_t.ln(),
            spec.angle,
            spec.noise_variance.ln(),
        ];
        for p in z {
            v.extend_from_slice(&p.x);
        }
        let (n_a, rank) = match &spec.coregionalization {
            Some(c) => {
                v.extend_from_slice(&c.a);
                (c.a.len(), c.rank)
            }
            None => (0, 0),
        };
        let layout = Layout {
            m: z.len(),
            n_a,
            lanes: z.iter().map(|p| p.lane).collect(),
            family: spec.family,
            rank,
        };
        (layout, v)
    }

    fn unpack(&self, v: &[f64]) -> (KernelSpec, Vec<Input>) {
        let mut spec = KernelSpec::new(self.family, v[0].exp(), [v[1].exp(), v[2].exp()], v[3], v[4].exp());
        let z = (0..self.m)
            .map(|i| Input::new([v[5 + 2 * i], v[6 + 2 * i]], self.lanes[i]))
            .collect();
        if self.n_a > 0 {
            let start = 5 + 2 * self.m;
            spec.coregionalization = Some(Coregionalization {
                rank: self.rank,
                a: v[start..start + self.n_a].to_vec(),
            });
        }
        (spec, z)
    }

    fn gradient(&self, g: &ElboGradient) -> Vec<f64> {
        let mut out = vec![
            g.log_variance,
            g.log_lengthscale_s,
            g.log_lengthscale_t,
            g.angle,
            g.log_noise_variance,
        ];
        for d in &g.inducing {
            out.extend_from_slice(d);
        }
        out.extend_from_slice(&g.coregionalization);
        out
    }
}

/// Fits hyperparameters, inducing locations and coregionalization by
/// gradient ascent on the ELBO (Rprop step sizes, steps that lower the bound
/// are rejected).
pub fn fit(
    train: &ObservationSet,
    grid: &SpatioTemporalGrid,
    config: &FitConfig,
    init: &KernelSpec,
    seed: u64,
) -> Result<TrainedModel> {
    if train.is_empty() {
        return Err(Error::EmptyObservations);
    }
    let inducing = if init.coregionalization.is_some() {
        init_inducing_multi(grid, &lane_counts(train, init.outputs()), seed, train.units)
    } else {
        init_inducing_with_units(grid, train.len(), seed, train.units)
    };
    fit_with_inducing(train, Some(grid), config, init, inducing, seed)
}

pub(crate) fn lane_counts(train: &ObservationSet, lanes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; lanes];
    for &l in &train.lane {
        if (l as usize) <= lanes && l >= 1 {
            counts[l as usize - 1] += 1;
        }
    }
    counts
}

/// Box for log-lengthscales: `[1e-3, 1e3]` times the domain size. A wave
/// that is exactly invariant along its characteristic leaves the ELBO flat in
/// that direction, so the long lengthscale would otherwise drift without end.
fn lengthscale_bounds(train: &ObservationSet, grid: Option<&SpatioTemporalGrid>) -> (f64, f64) {
    let extent = match grid {
        Some(g) => g.extent(train.units),
        None => {
            let span = |d: usize| {
                let lo = train.x.iter().map(|x| x[d]).fold(f64::INFINITY, f64::min);
                let hi = train.x.iter().map(|x| x[d]).fold(f64::NEG_INFINITY, f64::max);
                (hi - lo).max(1.0)
            };
            [span(0), span(1)]
        }
    };
    ((1e-3 * extent[0].min(extent[1])).ln(), (1e3 * extent[0].max(extent[1])).ln())
}

/// Like [`fit`] but starting from an explicit inducing set.
pub fn fit_with_inducing(
    train: &ObservationSet,
    grid: Option<&SpatioTemporalGrid>,
    config: &FitConfig,
    init: &KernelSpec,
    inducing: InducingSet,
    seed: u64,
) -> Result<TrainedModel> {
    let kernel0 = init.evaluator()?;
    let x = train.inputs();
    kernel0.check_inputs(&x)?;
    kernel0.check_inputs(&inducing.points)?;
    if inducing.len() > train.len() {
        warn!("{} inducing points for {} observations", inducing.len(), train.len());
    }
    let offset = config.mean.offset(&train.y);
    let y = DVector::from_iterator(train.len(), train.y.iter().map(|v| v - offset));

    let (layout, mut theta) = Layout::pack(init, &inducing.points);
    let ls_bounds = lengthscale_bounds(train, grid);
    for i in [1, 2] {
        theta[i] = theta[i].clamp(ls_bounds.0, ls_bounds.1);
    }
    let mut free = vec![true; layout.len()];
    free[3] = config.optimize_angle;
    for f in free.iter_mut().skip(5).take(2 * layout.m) {
        *f = config.optimize_inducing;
    }
    for f in free.iter_mut().skip(5 + 2 * layout.m) {
        *f = config.optimize_coregionalization;
    }

    let eval = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (spec, z) = layout.unpack(theta);
        let kernel = spec.evaluator()?;
        let e = elbo_inner(&kernel, &spec, &z, &x, &y)?;
        Ok((e.value, layout.gradient(&e.gradient)))
    };

    let (mut f, mut g) = eval(&theta)?;
    if !f.is_finite() {
        return Err(Error::Other(format!("initial ELBO is not finite ({f})")));
    }
    let initial = f;
    let mut step: Vec<f64> = (0..layout.len())
        .map(|i| match i {
            0..=4 => config.initial_step,
            i if i < 5 + 2 * layout.m => {
                let ls = if (i - 5) % 2 == 0 { init.lengthscale_s } else { init.lengthscale_t };
                0.1 * ls
            }
            _ => config.initial_step,
        })
        .collect();
    let max_step: Vec<f64> = step.iter().map(|s| s * 50.0).collect();
    let mut prev_g = vec![0.0; layout.len()];
    let mut history = vec![f];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut diagnostic = None;
    let mut iterations = 0;

    while iterations < config.max_iterations {
        iterations += 1;
        let mut cand = theta.clone();
        let mut moving = g.clone();
        for i in 0..layout.len() {
            if !free[i] {
                moving[i] = 0.0;
                continue;
            }
            let s = g[i] * prev_g[i];
            if s > 0.0 {
                step[i] = (step[i] * 1.2).min(max_step[i]);
            } else if s < 0.0 {
                step[i] *= 0.5;
                moving[i] = 0.0;
            }
            if moving[i] != 0.0 {
                cand[i] += moving[i].signum() * step[i];
            }
        }
        for i in [1, 2] {
            cand[i] = cand[i].clamp(ls_bounds.0, ls_bounds.1);
        }
        match eval(&cand) {
            Ok((fc, gc)) if fc.is_finite() && gc.iter().all(|v| v.is_finite()) => {
                if fc >= f {
                    theta = cand;
                    prev_g = moving;
                    f = fc;
                    g = gc;
                } else {
                    for s in step.iter_mut() {
                        *s *= 0.5;
                    }
                    prev_g = vec![0.0; layout.len()];
                }
            }
            Ok((fc, _)) => {
                diagnostic = Some(format!("non-finite ELBO ({fc}) at iteration {iterations}; kept last good parameters"));
                warn!("{}", diagnostic.as_ref().unwrap());
                break;
            }
            Err(Error::Conditioning { .. }) => {
                for s in step.iter_mut() {
                    *s *= 0.5;
                }
                prev_g = vec![0.0; layout.len()];
            }
            Err(e) => return Err(e),
        }
        history.push(f);
        trace.push(f);
        let h = history.len();
        if h > config.patience {
            let past = history[h - 1 - config.patience];
            if (f - past) <= config.tolerance * f.abs() {
                converged = true;
                break;
            }
        }
        if step.iter().zip(&free).all(|(s, &fr)| !fr || *s < 1e-12) {
            converged = true;
            break;
        }
    }

    let (mut spec, z) = layout.unpack(&theta);
    if config.optimize_angle {
        spec = spec.canonical();
    }
    let kernel = spec.evaluator()?;
    let cache = build_cache(&kernel, &spec, &z, &x, &y)?;
    Ok(TrainedModel {
        kernel: spec,
        inducing: InducingSet { points: z },
        mean_mode: config.mean,
        mean_offset: offset,
        jitter: cache.jitter,
        inducing_mean: cache.inducing_mean,
        precision: cache.precision,
        units: train.units,
        grid: grid.copied(),
        metadata: TrainingMetadata {
            iterations,
            initial_elbo: Some(initial),
            final_elbo: Some(f),
            seed,
            converged,
            optimized: true,
            n_train: train.len(),
            data_digest: data_digest(train),
            trace,
            diagnostic,
        },
    })
}

/// Builds the predictive cache for fixed hyperparameters and randomly placed
/// inducing points; nothing is optimized.
pub fn fit_pretrained(
    train: &ObservationSet,
    grid: &SpatioTemporalGrid,
    pretrained: &KernelSpec,
    mean: MeanMode,
    seed: u64,
) -> Result<TrainedModel> {
    let inducing = if pretrained.coregionalization.is_some() {
        init_inducing_multi(grid, &lane_counts(train, pretrained.outputs()), seed, train.units)
    } else {
        init_inducing_with_units(grid, train.len(), seed, train.units)
    };
    model_from_parts(train, Some(grid), pretrained, inducing, mean, seed)
}

/// Predictive cache for given hyperparameters and inducing set.
pub fn model_from_parts(
    train: &ObservationSet,
    grid: Option<&SpatioTemporalGrid>,
    spec: &KernelSpec,
    inducing: InducingSet,
    mean: MeanMode,
    seed: u64,
) -> Result<TrainedModel> {
    if train.is_empty() {
        return Err(Error::EmptyObservations);
    }
    let kernel = spec.evaluator()?;
    let x = train.inputs();
    kernel.check_inputs(&x)?;
    kernel.check_inputs(&inducing.points)?;
    let offset = mean.offset(&train.y);
    let y = DVector::from_iterator(train.len(), train.y.iter().map(|v| v - offset));
    let cache = build_cache(&kernel, spec, &inducing.points, &x, &y)?;
    Ok(TrainedModel {
        kernel: spec.clone(),
        inducing,
        mean_mode: mean,
        mean_offset: offset,
        jitter: cache.jitter,
        inducing_mean: cache.inducing_mean,
        precision: cache.precision,
        units: train.units,
        grid: grid.copied(),
        metadata: TrainingMetadata {
            iterations: 0,
            initial_elbo: None,
            final_elbo: None,
            seed,
            converged: true,
            optimized: false,
            n_train: train.len(),
            data_digest: data_digest(train),
            trace: Vec::new(),
            diagnostic: None,
        },
    })
}

/// Factored form of a [`TrainedModel`] ready for queries.
pub struct Predictor {
    kernel: Kernel,
    z: Vec<Input>,
    lm: DMatrix<f64>,
    lb: DMatrix<f64>,
    weights: DVector<f64>,
    noise: f64,
    offset: f64,
    bounds: Option<[f64; 2]>,
}

impl TrainedModel {
    pub fn predictor(&self) -> Result<Predictor> {
        let kernel = self.kernel.evaluator()?;
        let z = self.inducing.points.clone();
        let mut kmm = kernel.gram_sym(&z);
        for i in 0..z.len() {
            kmm[(i, i)] += self.jitter;
        }
        let chol = kmm.cholesky().ok_or(Error::Conditioning { jitter: self.jitter })?;
        let lm = chol.l();
        let weights = chol.solve(&DVector::from_column_slice(&self.inducing_mean));
        // B = L^T Lambda L
        let b = lm.transpose() * &self.precision * &lm;
        let b = (&b + b.transpose()) * 0.5;
        let lb = b.cholesky().ok_or(Error::Conditioning { jitter: self.jitter })?.l();
        Ok(Predictor {
            kernel,
            z,
            lm,
            lb,
            weights,
            noise: self.kernel.noise_variance,
            offset: self.mean_offset,
            bounds: self.grid.map(|g| g.extent(self.units)),
        })
    }

    pub fn predict(&self, queries: &[Input], opts: PredictOptions) -> Result<Posterior> {
        self.predictor()?.predict(queries, opts)
    }

    pub fn is_multi_output(&self) -> bool {
        self.kernel.coregionalization.is_some()
    }
}

impl Predictor {
    fn block(&self, queries: &[Input]) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
        let kmq = self.kernel.gram(&self.z, queries);
        let mean = (kmq.transpose() * &self.weights).iter().map(|v| v + self.offset).collect();
        let v1 = solve_lower(&self.lm, &kmq);
        let v2 = solve_lower(&self.lb, &v1);
        (v1, v2, mean)
    }

    pub fn predict(&self, queries: &[Input], opts: PredictOptions) -> Result<Posterior> {
        if queries.is_empty() {
            return Ok(Posterior::empty());
        }
        self.kernel.check_inputs(queries)?;
        let extrapolated = match self.bounds {
            Some([smax, tmax]) => queries
                .iter()
                .filter(|q| !(q.x[0] >= 0.0 && q.x[0] <= smax && q.x[1] >= 0.0 && q.x[1] <= tmax))
                .count(),
            None => 0,
        };
        if extrapolated > 0 {
            warn!("{extrapolated} queries lie outside the training grid (extrapolation)");
        }
        let noise = if opts.include_noise { self.noise } else { 0.0 };
        if queries.len() <= opts.full_covariance_cap {
            let (v1, v2, mean) = self.block(queries);
            let mut cov = self.kernel.gram_sym(queries) - v1.transpose() * &v1 + v2.transpose() * &v2;
            let cov_t = cov.transpose();
            cov = (cov + cov_t) * 0.5;
            for i in 0..cov.nrows() {
                cov[(i, i)] = cov[(i, i)].max(0.0) + noise;
            }
            let variance = cov.diagonal().iter().copied().collect();
            return Ok(Posterior {
                mean,
                variance,
                covariance: Some(cov),
                extrapolated,
            });
        }
        let parts: Vec<(Vec<f64>, Vec<f64>)> = queries
            .par_chunks(PREDICT_CHUNK)
            .map(|chunk| {
                let (v1, v2, mean) = self.block(chunk);
                let var = chunk
                    .iter()
                    .enumerate()
                    .map(|(q, x)| {
                        (self.kernel.diag(x) - v1.column(q).norm_squared() + v2.column(q).norm_squared()).max(0.0)
                            + noise
                    })
                    .collect();
                (mean, var)
            })
            .collect();
        let mut mean = Vec::with_capacity(queries.len());
        let mut variance = Vec::with_capacity(queries.len());
        for (m, v) in parts {
            mean.extend(m);
            variance.extend(v);
        }
        Ok(Posterior {
            mean,
            variance,
            covariance: None,
            extrapolated,
        })
    }
}

// ---- serialization ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InducingFile {
    coordinates: Vec<[f64; 2]>,
    lanes: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheFile {
    mean_mode: MeanMode,
    mean_offset: f64,
    jitter: f64,
    inducing_mean: Vec<f64>,
    /// Row-major `m x m`.
    precision: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    kernel: KernelSpec,
    inducing: InducingFile,
    cache: CacheFile,
    units: CoordinateUnits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<SpatioTemporalGrid>,
    metadata: TrainingMetadata,
}

impl TrainedModel {
    pub fn to_json(&self) -> Result<String> {
        let m = self.inducing.len();
        let precision = (0..m)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .map(|ij| self.precision[ij])
            .collect();
        let file = ModelFile {
            kernel: self.kernel.clone(),
            inducing: InducingFile {
                coordinates: self.inducing.points.iter().map(|p| p.x).collect(),
                lanes: self.inducing.points.iter().map(|p| p.lane).collect(),
            },
            cache: CacheFile {
                mean_mode: self.mean_mode,
                mean_offset: self.mean_offset,
                jitter: self.jitter,
                inducing_mean: self.inducing_mean.clone(),
                precision,
            },
            units: self.units,
            grid: self.grid,
            metadata: self.metadata.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.kernel.validate()?;
        let m = file.inducing.coordinates.len();
        if file.inducing.lanes.len() != m || file.cache.inducing_mean.len() != m || file.cache.precision.len() != m * m {
            return Err(Error::Other("model file has inconsistent cache dimensions".into()));
        }
        let points = file
            .inducing
            .coordinates
            .iter()
            .zip(&file.inducing.lanes)
            .map(|(x, &l)| Input::new(*x, l))
            .collect();
        Ok(Self {
            kernel: file.kernel,
            inducing: InducingSet { points },
            mean_mode: file.cache.mean_mode,
            mean_offset: file.cache.mean_offset,
            jitter: file.cache.jitter,
            inducing_mean: file.cache.inducing_mean,
            precision: DMatrix::from_row_slice(m, m, &file.cache.precision),
            units: file.units,
            grid: file.grid,
            metadata: file.metadata,
        })
    }
}
