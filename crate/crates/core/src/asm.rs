//! Adaptive smoothing baseline: two anisotropic exponential smoothers, one
//! along congested and one along free-flow characteristics, blended by the
//! local speed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CoordinateUnits, ObservationSet, SpatioTemporalGrid, SpeedField};

/// Exponents above this underflow `exp(-e)` to zero.
const UNDERFLOW_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsmParams {
    /// Congestion wave speed (km/h), negative.
    pub c_cong: f64,
    /// Free-flow wave speed (km/h), positive.
    pub c_free: f64,
    /// Spatial smoothing width (m). Defaults to `6 ds`.
    pub sigma_space: Option<f64>,
    /// Temporal smoothing width (s). Defaults to `1.1 dt`.
    pub tau_time: Option<f64>,
    /// Crossover speed (km/h).
    pub v_crit: f64,
    /// Transition width (km/h).
    pub delta_v: f64,
}

impl Default for AsmParams {
    fn default() -> Self {
        Self {
            c_cong: -15.0,
            c_free: 70.0,
            sigma_space: None,
            tau_time: None,
            v_crit: 54.0,
            delta_v: 18.0,
        }
    }
}

impl AsmParams {
    pub fn widths(&self, grid: &SpatioTemporalGrid) -> (f64, f64) {
        (
            self.sigma_space.unwrap_or(0.6 * grid.ds * 10.0),
            self.tau_time.unwrap_or(1.1 * grid.dt),
        )
    }

    /// Checks `c_cong < 0 < c_free` and positive widths.
    pub fn validate(&self) -> Result<()> {
        if !(self.c_cong < 0.0 && self.c_free > 0.0) {
            return Err(Error::Other(format!(
                "asm wave speeds must satisfy c_cong < 0 < c_free (got {}, {})",
                self.c_cong, self.c_free
            )));
        }
        self.check_widths()
    }

    fn check_widths(&self) -> Result<()> {
        let positive = |v: Option<f64>| v.is_none_or(|x| x.is_finite() && x > 0.0);
        if !(positive(self.sigma_space) && positive(self.tau_time) && self.delta_v > 0.0 && self.v_crit.is_finite()) {
            return Err(Error::Other("asm widths must be positive".into()));
        }
        if !(self.c_cong.is_finite() && self.c_cong != 0.0 && self.c_free.is_finite() && self.c_free != 0.0) {
            return Err(Error::Other("asm wave speeds must be finite and non-zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsmEstimate {
    pub field: SpeedField,
    /// Cells where both smoothers had negligible weight and the global mean
    /// was used.
    pub fallback: Vec<bool>,
}

impl AsmEstimate {
    pub fn fallback_count(&self) -> usize {
        self.fallback.iter().filter(|&&f| f).count()
    }
}

/// Weighted mean of `v` with weights `exp(-e)`, or `None` on underflow.
fn smooth(exponents: &[f64], v: &[f64]) -> Option<f64> {
    let min = exponents.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min <= UNDERFLOW_EXPONENT) {
        return None;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (e, y) in exponents.iter().zip(v) {
        let w = (min - e).exp();
        num += w * y;
        den += w;
    }
    Some(num / den)
}

/// Estimates every cell of every lane from same-lane observations.
pub fn asm_estimate(obs: &ObservationSet, grid: &SpatioTemporalGrid, params: &AsmParams) -> Result<AsmEstimate> {
    if obs.is_empty() {
        return Err(Error::EmptyObservations);
    }
    params.check_widths()?;
    let (sigma, tau) = params.widths(grid);
    let c_cong = params.c_cong / 3.6;
    let c_free = params.c_free / 3.6;
    let global = obs.y.iter().sum::<f64>() / obs.len() as f64;

    let mut values = Vec::with_capacity(grid.len());
    let mut fallback = Vec::with_capacity(grid.len());
    for lane in 1..=grid.n_lanes as u32 {
        let lane_obs = obs.select_lane(lane);
        let pos: Vec<[f64; 2]> = lane_obs.x.iter().map(|&x| grid.to_physical(x, obs.units)).collect();
        let cells: Vec<(Option<f64>, bool)> = (0..grid.cells_per_lane())
            .into_par_iter()
            .map(|k| {
                let (i, j) = (k / grid.n_time, k % grid.n_time);
                let [s, t] = grid.cell_center(i, j, CoordinateUnits::Physical);
                let mut e_cong = Vec::with_capacity(pos.len());
                let mut e_free = Vec::with_capacity(pos.len());
                for p in &pos {
                    let ds = p[0] - s;
                    let dt = p[1] - t;
                    let base = ds.abs() / sigma;
                    e_cong.push(base + (dt - ds / c_cong).abs() / tau);
                    e_free.push(base + (dt - ds / c_free).abs() / tau);
                }
                let vc = smooth(&e_cong, &lane_obs.y);
                let vf = smooth(&e_free, &lane_obs.y);
                match (vc, vf) {
                    (Some(vc), Some(vf)) => {
                        let w = 0.5 * (1.0 + ((params.v_crit - 3.6 * vc.min(vf)) / params.delta_v).tanh());
                        (Some(w * vc + (1.0 - w) * vf), false)
                    }
                    (Some(v), None) | (None, Some(v)) => (Some(v), false),
                    (None, None) => (None, true),
                }
            })
            .collect();
        for (v, fb) in cells {
            values.push(v.unwrap_or(global));
            fallback.push(fb);
        }
    }
    Ok(AsmEstimate {
        field: SpeedField::dense(*grid, values),
        fallback,
    })
}
