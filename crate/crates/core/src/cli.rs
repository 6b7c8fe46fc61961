//! Subcommands of the `tse` binary. Every command writes its artifacts plus a
//! `manifest_<command>.json` with the effective configuration, its digest and
//! digests of the deterministic artifacts.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{info, warn};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{run_sweep, wave_speed_from_angle, write_heatmaps, Dataset, Method, Pretrained};
use crate::grid::{
    aggregate_to_grid, field_to_observations, ingest_trajectories, sample_penetration, write_trajectories,
    CoordinateUnits, SpatioTemporalGrid, SpeedField, TrajectoryPoint,
};
use crate::kernels::KernelSpec;
use crate::multilane::predict_grid;
use crate::synth::{generate_field, trajectories_in_field};
use crate::vsgp::TrainedModel;

#[derive(Debug, Parser)]
#[command(name = "tse", version, about = "Traffic speed field estimation with rotated-kernel sparse GPs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Aggregate trajectories into an observed speed field.
    Ingest,
    /// Fit a model and write it as JSON.
    Fit,
    /// Predict the full field from a fitted model.
    Predict,
    /// Run the penetration-rate experiment.
    Sweep,
    /// Generate a synthetic scenario.
    Synth,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::Sweep => "sweep",
            Command::Synth => "synth",
        }
    }
}

/// 2 for configuration errors, 1 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

/// Reads the configuration and applies command-line overrides.
pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = &cli.output {
        cfg.output.directory = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = load_config(cli)?;
    if let Some(t) = cfg.threads {
        // a second initialization (e.g. in tests) keeps the existing pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match cli.command {
        Command::Ingest => cmd_ingest(&cfg),
        Command::Fit => cmd_fit(&cfg),
        Command::Predict => cmd_predict(&cfg),
        Command::Sweep => cmd_sweep(&cfg),
        Command::Synth => cmd_synth(&cfg),
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn config_digest(cfg: &RunConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_string(cfg)?.as_bytes())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes `manifest_<command>.json`. `tracked` files are digested; `untracked`
/// ones (timings) are only listed.
fn write_manifest(cfg: &RunConfig, command: Command, tracked: &[PathBuf], untracked: &[PathBuf]) -> Result<PathBuf> {
    let mut artifacts = serde_json::Map::new();
    for p in tracked {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        artifacts.insert(name, json!(sha256_file(p)?));
    }
    let untracked: Vec<String> = untracked
        .iter()
        .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let doc = json!({
        "command": command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config_sha256": config_digest(cfg)?,
        "config": cfg,
        "artifacts": artifacts,
        "untracked": untracked,
    });
    let path = cfg.output.directory.join(format!("manifest_{}.json", command.name()));
    write_text(&path, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    Ok(path)
}

fn load_points(cfg: &RunConfig, grid: &SpatioTemporalGrid) -> Result<Vec<TrajectoryPoint>> {
    let path = cfg.trajectories_path();
    let file = File::open(&path).map_err(|_| Error::MissingFile(path.clone()))?;
    let ingested = ingest_trajectories(BufReader::new(file), &cfg.data.schema, grid)?;
    if ingested.dropped > 0 {
        info!("dropped {} rows outside the grid", ingested.dropped);
    }
    Ok(ingested.points)
}

fn load_truth(cfg: &RunConfig, grid: &SpatioTemporalGrid) -> Result<Option<SpeedField>> {
    match &cfg.data.truth {
        Some(p) => {
            let f = File::open(p).map_err(|_| Error::MissingFile(p.clone()))?;
            Ok(Some(SpeedField::read_csv(BufReader::new(f), *grid)?))
        }
        None => Ok(None),
    }
}

fn read_pretrained(path: &Path) -> Result<KernelSpec> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    if let Ok(model) = TrainedModel::from_json(&text) {
        return Ok(model.kernel);
    }
    let spec: KernelSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    Ok(spec)
}

/// Replaces a pretrained file reference by its kernel spec.
fn resolve_pretrained(cfg: &RunConfig) -> Result<RunConfig> {
    let mut cfg = cfg.clone();
    if let Some(Pretrained::Path(p)) = &cfg.model.pretrained {
        cfg.model.pretrained = Some(Pretrained::Spec(read_pretrained(p)?));
    }
    Ok(cfg)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output.directory;
    let scn = &cfg.synth;
    let field = generate_field(scn, cfg.seed)?;
    let points = trajectories_in_field(scn, &field, scn.vehicles, cfg.seed)?;
    let traj = dir.join("trajectories.csv");
    let truth = dir.join("truth_field.csv");
    let grid = dir.join("grid.json");
    let scenario = dir.join("scenario.json");
    write_text(&scenario, &(serde_json::to_string_pretty(scn)? + "\n"))?;
    let f = File::create(&traj).map_err(|e| Error::io(format!("creating {}", traj.display()), e))?;
    write_trajectories(&points, BufWriter::new(f))?;
    field.save(&truth, &grid)?;
    let files = vec![traj, truth, grid, scenario];
    let manifest = write_manifest(cfg, Command::Synth, &files, &[])?;
    println!("synthesized {} trajectory points into {}", points.len(), dir.display());
    Ok([files, vec![manifest]].concat())
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let grid = cfg.resolve_grid()?;
    let points = load_points(cfg, &grid)?;
    let field = aggregate_to_grid(&points, &grid);
    let dir = &cfg.output.directory;
    let csv = dir.join("observed_field.csv");
    let grid_path = dir.join("grid.json");
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    field.save(&csv, &grid_path)?;
    let files = vec![csv, grid_path];
    let manifest = write_manifest(cfg, Command::Ingest, &files, &[])?;
    println!("{} points, {} observed cells of {}", points.len(), field.n_present(), grid.len());
    Ok([files, vec![manifest]].concat())
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    if cfg.model.method == Method::Asm {
        return Err(Error::config("/model/method", "asm has no model to fit"));
    }
    let cfg = &resolve_pretrained(cfg)?;
    let grid = cfg.resolve_grid()?;
    let mut points = load_points(cfg, &grid)?;
    if let Some(rate) = cfg.data.rate {
        points = sample_penetration(&points, rate, cfg.seed)?.0;
    }
    let observed = aggregate_to_grid(&points, &grid);
    let obs = field_to_observations(&observed, None, cfg.model.units)?;
    let model = cfg.model.train(cfg.model.method, &obs, &grid, cfg.seed)?;
    if let Some(d) = &model.metadata.diagnostic {
        warn!("{d}");
    }
    let path = cfg.model_path();
    write_text(&path, &model.to_json()?)?;
    let k = &model.kernel;
    let (ds, dt) = match model.units {
        CoordinateUnits::Cells => (grid.ds, grid.dt),
        CoordinateUnits::Physical => (1.0, 1.0),
    };
    let speed = wave_speed_from_angle(k.angle, ds, dt)
        .map(|c| format!("{c:.2} km/h"))
        .unwrap_or_else(|_| "n/a".into());
    println!(
        "{} observations, {} inducing points, {} iterations, ELBO {:?}; angle {:.4} rad, wave speed {speed}",
        obs.len(),
        model.inducing.len(),
        model.metadata.iterations,
        model.metadata.final_elbo,
        k.angle
    );
    let manifest = write_manifest(cfg, Command::Fit, std::slice::from_ref(&path), &[])?;
    Ok(vec![path, manifest])
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let model_path = cfg.model_path();
    let text = std::fs::read_to_string(&model_path).map_err(|_| Error::MissingFile(model_path.clone()))?;
    let model = TrainedModel::from_json(&text)?;
    let grid = match (cfg.data.grid, model.grid) {
        (Some(g), _) | (None, Some(g)) => g,
        (None, None) => cfg.resolve_grid()?,
    };
    let pred = predict_grid(&model, &grid, true)?;
    let dir = &cfg.output.directory;
    let est = dir.join("estimate.csv");
    let var = dir.join("variance.csv");
    let grid_path = dir.join("grid.json");
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    pred.estimate.save(&est, &grid_path)?;
    let f = File::create(&var).map_err(|e| Error::io(format!("creating {}", var.display()), e))?;
    pred.variance.write_csv(BufWriter::new(f))?;
    let mut files = vec![est, var, grid_path];
    if cfg.output.heatmaps {
        let k = cfg.output.sigma_multiplier;
        let band = SpeedField::dense(
            grid,
            pred.variance.values.iter().map(|v| k * v.unwrap_or(0.0).sqrt()).collect(),
        );
        let truth = load_truth(cfg, &grid)?;
        files.extend(write_heatmaps(&dir.join("heatmaps"), &pred.estimate, truth.as_ref(), Some(&band))?);
    }
    let manifest = write_manifest(cfg, Command::Predict, &files, &[])?;
    println!("predicted {} cells", grid.len());
    files.push(manifest);
    Ok(files)
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let cfg = &match resolve_pretrained(cfg) {
        Ok(c) => c,
        Err(e) => {
            // pretrained runs are then recorded as failed
            warn!("pretrained spec unavailable: {e}");
            cfg.clone()
        }
    };
    let grid = cfg.resolve_grid()?;
    let points = load_points(cfg, &grid)?;
    let mut data = Dataset::new(points, grid);
    if let Some(truth) = load_truth(cfg, &grid)? {
        data.truth = truth;
    }
    let mut sweep = cfg.sweep.clone();
    sweep.base_seed = cfg.seed;
    let provenance = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": config_digest(cfg)?,
        "seeds": (0..sweep.seeds).map(|k| cfg.seed + k as u64).collect::<Vec<_>>(),
        "config": cfg,
    });
    let report = run_sweep(&data, &sweep, &cfg.model, &cfg.baselines.asm, cfg.threads, provenance)?;
    let dir = &cfg.output.directory;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let csv = dir.join("report.csv");
    let json_path = dir.join("report.json");
    let timing = dir.join("timing.json");
    let f = File::create(&csv).map_err(|e| Error::io(format!("creating {}", csv.display()), e))?;
    report.write_csv(BufWriter::new(f))?;
    write_text(&json_path, &report.to_json()?)?;
    write_text(&timing, &report.timing_json()?)?;
    for g in &report.groups {
        println!(
            "{:<13} rate {:<5} runs {:>2} failed {:>2}  MAE {}  RMSE {}",
            g.method.name(),
            g.rate,
            g.runs,
            g.failed,
            fmt_stat(g.mae_mean, g.mae_std),
            fmt_stat(g.rmse_mean, g.rmse_std)
        );
    }
    let manifest = write_manifest(cfg, Command::Sweep, std::slice::from_ref(&json_path), &[csv.clone(), timing.clone()])?;
    Ok(vec![csv, json_path, timing, manifest])
}

fn fmt_stat(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.3} ({s:.3})"),
        (Some(m), None) => format!("{m:.3}"),
        _ => "-".into(),
    }
}
