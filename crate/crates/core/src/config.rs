//! Run configuration: one JSON document with data, model, baseline, sweep,
//! output and synthesis blocks. Unknown keys are rejected and every semantic
//! error names the offending key as a JSON pointer.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_path_to_error::Segment;

use crate::asm::AsmParams;
use crate::error::{Error, Result};
use crate::eval::{ModelConfig, Pretrained, SweepConfig};
use crate::grid::{CsvSchema, SpatioTemporalGrid};
use crate::synth::WaveScenario;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Trajectory CSV; defaults to `<output>/trajectories.csv`.
    pub trajectories: Option<PathBuf>,
    pub schema: CsvSchema,
    /// Defaults to `<output>/grid.json` when that file exists.
    pub grid: Option<SpatioTemporalGrid>,
    /// Ground-truth field CSV (SpeedField format). Defaults to the aggregate
    /// of all trajectories.
    pub truth: Option<PathBuf>,
    /// Penetration rate applied before fitting.
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub asm: AsmParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    /// Model file written by `fit` and read by `predict`; defaults to
    /// `<directory>/model.json`.
    pub model: Option<PathBuf>,
    pub heatmaps: bool,
    /// Multiplier of the standard deviation in uncertainty maps.
    pub sigma_multiplier: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            model: None,
            heatmaps: true,
            sigma_multiplier: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub baselines: BaselineConfig,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
    pub synth: WaveScenario,
}

fn pointer_from(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

impl RunConfig {
    /// Parses and validates a configuration document.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = pointer_from(e.path());
            Error::config(pointer, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |ptr: &str, r: Result<()>| r.map_err(|e| Error::config(ptr, e.to_string()));
        if self.threads == Some(0) {
            return Err(Error::config("/threads", "must be at least 1"));
        }
        if let Some(g) = &self.data.grid {
            wrap("/data/grid", g.validate())?;
        }
        if let Some(r) = self.data.rate {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config("/data/rate", format!("rate {r} is outside (0, 1]")));
            }
        }
        let fit = &self.model.fit;
        if fit.max_iterations == 0 {
            return Err(Error::config("/model/fit/max_iterations", "must be at least 1"));
        }
        if !(fit.tolerance >= 0.0) {
            return Err(Error::config("/model/fit/tolerance", "must be non-negative"));
        }
        if fit.patience == 0 {
            return Err(Error::config("/model/fit/patience", "must be at least 1"));
        }
        if !(fit.initial_step > 0.0 && fit.initial_step.is_finite()) {
            return Err(Error::config("/model/fit/initial_step", "must be positive"));
        }
        if self.model.rank == Some(0) {
            return Err(Error::config("/model/rank", "must be at least 1"));
        }
        if let Some(spec) = &self.model.init {
            wrap("/model/init", spec.validate())?;
        }
        if let Some(Pretrained::Spec(spec)) = &self.model.pretrained {
            wrap("/model/pretrained", spec.validate())?;
        }
        wrap("/baselines/asm", self.baselines.asm.validate())?;
        if self.sweep.methods.is_empty() {
            return Err(Error::config("/sweep/methods", "at least one method is required"));
        }
        if self.sweep.rates.is_empty() {
            return Err(Error::config("/sweep/rates", "at least one rate is required"));
        }
        for (k, &r) in self.sweep.rates.iter().enumerate() {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config(format!("/sweep/rates/{k}"), format!("rate {r} is outside (0, 1]")));
            }
        }
        if self.sweep.seeds == 0 {
            return Err(Error::config("/sweep/seeds", "must be at least 1"));
        }
        if !(self.output.sigma_multiplier >= 0.0 && self.output.sigma_multiplier.is_finite()) {
            return Err(Error::config("/output/sigma_multiplier", "must be non-negative"));
        }
        wrap("/synth", self.synth.validate())?;
        if self.synth.vehicles == 0 {
            return Err(Error::config("/synth/vehicles", "must be at least 1"));
        }
        Ok(())
    }

    pub fn trajectories_path(&self) -> PathBuf {
        self.data
            .trajectories
            .clone()
            .unwrap_or_else(|| self.output.directory.join("trajectories.csv"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.output
            .model
            .clone()
            .unwrap_or_else(|| self.output.directory.join("model.json"))
    }

    /// Configured grid, else `<output>/grid.json`.
    pub fn resolve_grid(&self) -> Result<SpatioTemporalGrid> {
        if let Some(g) = self.data.grid {
            return Ok(g);
        }
        let path = self.output.directory.join("grid.json");
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                let g: SpatioTemporalGrid = serde_json::from_str(&text)?;
                g.validate()?;
                Ok(g)
            }
            Err(_) => Err(Error::config(
                "/data/grid",
                format!("no grid configured and {} does not exist", path.display()),
            )),
        }
    }
}
