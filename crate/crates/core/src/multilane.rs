//! Joint estimation across lanes with a coregionalized kernel over the
//! extended (location, lane) input space.

use crate::error::{Error, Result};
use crate::gp_exact::PredictOptions;
use crate::grid::{ObservationSet, SpatioTemporalGrid, SpeedField};
use crate::kernels::{Coregionalization, KernelSpec};
use crate::vsgp::{fit, FitConfig, TrainedModel};

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLaneProblem {
    /// Observations of lane `l` at index `l - 1`.
    pub lanes: Vec<ObservationSet>,
    pub grid: SpatioTemporalGrid,
    pub coregionalization: Coregionalization,
}

impl MultiLaneProblem {
    /// Splits a lane-tagged observation set, with identity coregionalization
    /// of full rank.
    pub fn from_observations(obs: &ObservationSet, grid: SpatioTemporalGrid) -> Self {
        let lanes = (1..=grid.n_lanes as u32).map(|l| obs.select_lane(l)).collect();
        Self {
            lanes,
            grid,
            coregionalization: Coregionalization::identity(grid.n_lanes, grid.n_lanes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lanes.len() != self.grid.n_lanes {
            return Err(Error::GridMismatch(format!(
                "{} lane observation sets for a {}-lane grid",
                self.lanes.len(),
                self.grid.n_lanes
            )));
        }
        self.coregionalization.validate()?;
        if self.coregionalization.outputs() != self.lanes.len() {
            return Err(Error::InvalidKernel(format!(
                "coregionalization has {} outputs for {} lanes",
                self.coregionalization.outputs(),
                self.lanes.len()
            )));
        }
        Ok(())
    }
}

/// Concatenates per-lane observations (lane-major, input order kept) and tags
/// each row with its lane index.
pub fn stack_heterotopic(problem: &MultiLaneProblem) -> Result<ObservationSet> {
    let units = problem.lanes.first().map(|o| o.units).unwrap_or_default();
    let mut out = ObservationSet {
        x: Vec::new(),
        lane: Vec::new(),
        y: Vec::new(),
        units,
    };
    for (k, obs) in problem.lanes.iter().enumerate() {
        if !obs.is_empty() && obs.units != units {
            return Err(Error::GridMismatch("lanes use different coordinate units".into()));
        }
        out.x.extend_from_slice(&obs.x);
        out.y.extend_from_slice(&obs.y);
        out.lane.extend(std::iter::repeat_n(k as u32 + 1, obs.len()));
    }
    if out.is_empty() {
        return Err(Error::EmptyObservations);
    }
    Ok(out)
}

/// One sparse GP over all lanes with `k(x, x') B[l, l']`.
pub fn fit_joint(problem: &MultiLaneProblem, config: &FitConfig, init: &KernelSpec, seed: u64) -> Result<TrainedModel> {
    problem.validate()?;
    let stacked = stack_heterotopic(problem)?;
    let spec = init.clone().with_coregionalization(problem.coregionalization.clone());
    fit(&stacked, &problem.grid, config, &spec, seed)
}

/// Per-lane estimates and predictive variances over every grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPrediction {
    pub estimate: SpeedField,
    pub variance: SpeedField,
}

/// Predicts every cell of every lane. Variances are in observation space
/// when `include_noise` is set.
pub fn predict_grid(model: &TrainedModel, grid: &SpatioTemporalGrid, include_noise: bool) -> Result<FieldPrediction> {
    let outputs = model.kernel.outputs();
    if grid.n_lanes > 1 && !model.is_multi_output() {
        return Err(Error::NotMultiOutput);
    }
    if model.is_multi_output() && outputs != grid.n_lanes {
        return Err(Error::GridMismatch(format!(
            "model has {outputs} outputs, grid has {} lanes",
            grid.n_lanes
        )));
    }
    let predictor = model.predictor()?;
    let opts = PredictOptions {
        include_noise,
        full_covariance_cap: 0,
    };
    let mut mean = Vec::with_capacity(grid.len());
    let mut var = Vec::with_capacity(grid.len());
    for lane in 1..=grid.n_lanes as u32 {
        let post = predictor.predict(&grid.lane_inputs(lane, model.units), opts)?;
        mean.extend(post.mean);
        var.extend(post.variance);
    }
    Ok(FieldPrediction {
        estimate: SpeedField::dense(*grid, mean),
        variance: SpeedField::dense(*grid, var),
    })
}

/// [`predict_grid`] for a multi-output model, with observation-space variance.
pub fn predict_joint(model: &TrainedModel, grid: &SpatioTemporalGrid) -> Result<FieldPrediction> {
    if grid.n_lanes > 1 && !model.is_multi_output() {
        return Err(Error::NotMultiOutput);
    }
    predict_grid(model, grid, true)
}
