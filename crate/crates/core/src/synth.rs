//! Synthetic traffic waves with a known propagation speed, and probe
//! trajectories driven through them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CoordinateUnits, SpatioTemporalGrid, SpeedField, TrajectoryPoint};

/// Integration substep (s).
const SUBSTEP: f64 = 0.1;
/// Substeps per sample (1 s sampling).
const SAMPLE_EVERY: usize = 10;
/// Slowest speed used for motion, so positions keep increasing.
const MIN_MOTION_SPEED: f64 = 0.1;
/// Gap kept behind the leader (m).
const MIN_GAP: f64 = 1e-3;

/// A congestion wave: a Gaussian dip in speed centred on the line
/// `s = s0 + (c / 3.6) (t - t0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveBand {
    /// Origin position (m from the grid origin).
    pub s0: f64,
    /// Origin time (s from the grid origin).
    pub t0: f64,
    /// Propagation speed (km/h), negative upstream.
    pub speed: f64,
    /// Standard deviation of the dip across the band (s).
    pub width: f64,
    /// Depth of the dip (m/s).
    pub amplitude: f64,
}

/// Per-lane modification of the bands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaneVariation {
    pub amplitude_scale: f64,
    /// Added to every band's `t0` (s).
    pub time_shift: f64,
}

impl Default for LaneVariation {
    fn default() -> Self {
        Self {
            amplitude_scale: 1.0,
            time_shift: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveScenario {
    pub grid: SpatioTemporalGrid,
    /// m/s
    pub v_free: f64,
    /// m/s
    pub v_jam: f64,
    pub bands: Vec<WaveBand>,
    /// Standard deviation of cell-wise Gaussian noise (m/s).
    pub noise_std: f64,
    /// Vehicles per lane.
    pub vehicles: usize,
    /// Minimum time between consecutive entries (s).
    pub min_headway: f64,
    /// Optional per-lane variation, indexed by lane - 1.
    pub lanes: Vec<LaneVariation>,
}

impl Default for WaveScenario {
    fn default() -> Self {
        Self {
            grid: SpatioTemporalGrid::new(3.0, 5.0, 60, 120, 1).expect("default grid"),
            v_free: 20.0,
            v_jam: 4.0,
            bands: vec![WaveBand {
                s0: 90.0,
                t0: 300.0,
                speed: -15.0,
                width: 30.0,
                amplitude: 16.0,
            }],
            noise_std: 1.0,
            vehicles: 400,
            min_headway: 1.0,
            lanes: Vec::new(),
        }
    }
}

impl WaveScenario {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.v_jam < self.v_free && self.v_jam >= 0.0) {
            return Err(Error::Other(format!(
                "scenario needs 0 <= v_jam < v_free (got {}, {})",
                self.v_jam, self.v_free
            )));
        }
        for b in &self.bands {
            if !(b.width > 0.0 && b.speed != 0.0 && b.speed.is_finite() && b.amplitude.is_finite()) {
                return Err(Error::Other("band widths must be positive and speeds non-zero".into()));
            }
        }
        if !(self.noise_std >= 0.0 && self.min_headway >= 0.0) {
            return Err(Error::Other("noise and headway must be non-negative".into()));
        }
        Ok(())
    }

    fn variation(&self, lane: u32) -> LaneVariation {
        self.lanes.get(lane as usize - 1).copied().unwrap_or_default()
    }

    /// Noise-free speed at physical offsets `(s, t)` from the grid origin.
    pub fn speed_at(&self, lane: u32, s: f64, t: f64) -> f64 {
        let var = self.variation(lane);
        let dip: f64 = self
            .bands
            .iter()
            .map(|b| {
                let tau = t - (b.t0 + var.time_shift + (s - b.s0) / (b.speed / 3.6));
                var.amplitude_scale * b.amplitude * (-tau * tau / (2.0 * b.width * b.width)).exp()
            })
            .sum();
        (self.v_free - dip).clamp(self.v_jam, self.v_free)
    }

    /// Angle of the long correlation axis in cell units for a wave of speed
    /// `c` (km/h).
    pub fn wave_angle(&self, c: f64) -> f64 {
        ((self.grid.ds / self.grid.dt) / (-c / 3.6)).atan()
    }
}

/// Truth field: the wave profile evaluated at cell centres plus Gaussian
/// noise, floored at zero.
pub fn generate_field(scn: &WaveScenario, seed: u64) -> Result<SpeedField> {
    scn.validate()?;
    let grid = scn.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, scn.noise_std).map_err(|e| Error::Other(e.to_string()))?;
    let mut values = Vec::with_capacity(grid.len());
    for lane in 1..=grid.n_lanes as u32 {
        for i in 0..grid.n_space {
            for j in 0..grid.n_time {
                let [s, t] = grid.cell_center(i, j, CoordinateUnits::Physical);
                let e = if scn.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                values.push((scn.speed_at(lane, s, t) + e).max(0.0));
            }
        }
    }
    Ok(SpeedField::dense(grid, values))
}

/// Field and trajectories from one seed.
pub fn generate_trajectories(scn: &WaveScenario, n_vehicles: usize, seed: u64) -> Result<Vec<TrajectoryPoint>> {
    let field = generate_field(scn, seed)?;
    trajectories_in_field(scn, &field, n_vehicles, seed)
}

/// Drives `n_vehicles` per lane through `field`. Vehicles enter at `s = 0` at
/// uniformly drawn times with a minimum headway, move at the speed of the
/// cell they occupy (free-flow speed outside the grid) and never pass their
/// leader. Samples are taken every second inside the grid; the reported speed
/// is the cell value.
pub fn trajectories_in_field(
    scn: &WaveScenario,
    field: &SpeedField,
    n_vehicles: usize,
    seed: u64,
) -> Result<Vec<TrajectoryPoint>> {
    scn.validate()?;
    if n_vehicles == 0 {
        return Err(Error::Other("at least one vehicle is required".into()));
    }
    let grid = field.grid;
    let length = grid.n_space as f64 * grid.ds;
    let duration = grid.n_time as f64 * grid.dt;
    // vehicles may enter early enough to be inside the section at t = 0
    let t_start = -length / scn.v_free;
    let ticks_total = ((duration - t_start) / SUBSTEP).ceil() as usize + 1;
    let tick_time = |k: usize| t_start + k as f64 * SUBSTEP;

    let mut out = Vec::new();
    for lane in 1..=grid.n_lanes as u32 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(lane));
        let mut entries: Vec<f64> = (0..n_vehicles).map(|_| rng.random_range(t_start..duration)).collect();
        entries.sort_by(f64::total_cmp);
        for k in 1..entries.len() {
            entries[k] = entries[k].max(entries[k - 1] + scn.min_headway);
        }

        let speed_at = |s: f64, t: f64| -> f64 {
            match grid.locate(s, t) {
                Some((i, j)) => field.get(lane, i, j).unwrap_or(scn.v_free),
                None => scn.v_free,
            }
        };
        // position of the previous vehicle per tick; infinite once it has left
        let mut leader = vec![f64::INFINITY; ticks_total];
        for (v, &entry) in entries.iter().enumerate() {
            let id = format!("l{lane}-v{v:04}");
            let mut path = vec![f64::NAN; ticks_total];
            let first = ((entry - t_start) / SUBSTEP).ceil() as usize;
            if first >= ticks_total {
                leader = path.iter().map(|_| f64::INFINITY).collect();
                continue;
            }
            let mut s = (tick_time(first) - entry) * speed_at(0.0, entry).max(MIN_MOTION_SPEED);
            s = s.min(leader[first] - MIN_GAP);
            let mut k = first;
            while k < ticks_total && s < length {
                path[k] = s;
                let t = tick_time(k);
                if k.is_multiple_of(SAMPLE_EVERY) && (0.0..duration).contains(&t) && s >= 0.0 {
                    if let Some((i, j)) = grid.locate(s, t) {
                        out.push(TrajectoryPoint {
                            vehicle_id: id.clone(),
                            t: t + grid.t_origin,
                            s: s + grid.s_origin,
                            lane,
                            speed: field.get(lane, i, j).unwrap_or(scn.v_free),
                        });
                    }
                }
                let step = speed_at(s, t).max(MIN_MOTION_SPEED) * SUBSTEP;
                let next = k + 1;
                let bound = if next < ticks_total { leader[next] - MIN_GAP } else { f64::INFINITY };
                s = (s + step).min(bound);
                k = next;
            }
            // once a vehicle exits it no longer constrains its follower
            leader = path.iter().map(|p| if p.is_nan() { f64::INFINITY } else { *p }).collect();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::aggregate_to_grid;
    use std::collections::HashMap;

    fn one_band(noise: f64) -> WaveScenario {
        WaveScenario {
            noise_std: noise,
            ..WaveScenario::default()
        }
    }

    #[test]
    fn no_bands_is_free_flow() {
        let scn = WaveScenario {
            bands: vec![],
            noise_std: 0.0,
            ..WaveScenario::default()
        };
        let f = generate_field(&scn, 1).unwrap();
        assert!(f.values.iter().all(|v| *v == Some(20.0)));
    }

    #[test]
    fn band_centre_is_jam_speed() {
        let scn = one_band(0.0);
        // on the characteristic line the dip equals the amplitude
        for s in [0.0, 45.0, 90.0, 150.0] {
            let t = 300.0 + (s - 90.0) / (-15.0 / 3.6);
            assert_eq!(scn.speed_at(1, s, t), 4.0);
        }
        assert_eq!(scn.speed_at(1, 90.0, 0.0), 20.0);
    }

    /// Direction of least change: for each angle `a` compare the field with
    /// itself shifted by `r (cos a, -sin a)` cells (bilinear interpolation).
    fn autocorrelation_angle(f: &SpeedField) -> f64 {
        let g = f.grid;
        let m = f.lane_matrix(1);
        let at = |x: f64, y: f64| -> Option<f64> {
            if x < 0.0 || y < 0.0 || x > (g.n_space - 1) as f64 || y > (g.n_time - 1) as f64 {
                return None;
            }
            let (i0, j0) = (x.floor() as usize, y.floor() as usize);
            let (i1, j1) = ((i0 + 1).min(g.n_space - 1), (j0 + 1).min(g.n_time - 1));
            let (fx, fy) = (x - i0 as f64, y - j0 as f64);
            Some(
                m[i0][j0] * (1.0 - fx) * (1.0 - fy)
                    + m[i1][j0] * fx * (1.0 - fy)
                    + m[i0][j1] * (1.0 - fx) * fy
                    + m[i1][j1] * fx * fy,
            )
        };
        let r = 12.0;
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..1000 {
            let a = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * k as f64 / 1000.0;
            let (dx, dy) = (r * a.cos(), -r * a.sin());
            let (mut sum, mut n) = (0.0, 0);
            for i in 0..g.n_space {
                for j in 0..g.n_time {
                    if let Some(v) = at(i as f64 + dx, j as f64 + dy) {
                        sum += (v - m[i][j]).powi(2);
                        n += 1;
                    }
                }
            }
            let msd = sum / n as f64;
            if msd < best.0 {
                best = (msd, a);
            }
        }
        best.1
    }

    #[test]
    fn empirical_wave_angle_matches_closed_form() {
        let scn = one_band(0.0);
        let f = generate_field(&scn, 0).unwrap();
        let expected = scn.wave_angle(-15.0);
        assert!((expected - 0.1433).abs() < 1e-3);
        let found = autocorrelation_angle(&f);
        assert!((found - expected).abs() <= 2.0 * std::f64::consts::PI / 1000.0, "{found} vs {expected}");
    }

    #[test]
    fn field_is_deterministic() {
        let scn = WaveScenario::default();
        assert_eq!(generate_field(&scn, 3).unwrap(), generate_field(&scn, 3).unwrap());
        assert_ne!(generate_field(&scn, 3).unwrap(), generate_field(&scn, 4).unwrap());
    }

    #[test]
    fn single_vehicle_in_constant_field() {
        let scn = WaveScenario {
            bands: vec![],
            noise_std: 0.0,
            ..WaveScenario::default()
        };
        let pts = generate_trajectories(&scn, 1, 11).unwrap();
        assert!(pts.len() >= 2);
        for w in pts.windows(2) {
            let slope = (w[1].s - w[0].s) / (w[1].t - w[0].t);
            assert!((slope - 20.0).abs() < 1e-9);
            assert_eq!(w[1].speed, 20.0);
        }
    }

    #[test]
    fn trajectories_are_monotone_ordered_and_match_field() {
        let scn = one_band(0.0);
        let field = generate_field(&scn, 2).unwrap();
        let pts = trajectories_in_field(&scn, &field, 200, 2).unwrap();
        assert_eq!(pts, trajectories_in_field(&scn, &field, 200, 2).unwrap());
        let mut by_vehicle: HashMap<&str, Vec<&TrajectoryPoint>> = HashMap::new();
        for p in &pts {
            let (i, j) = scn.grid.locate(p.s, p.t).unwrap();
            assert_eq!(Some(p.speed), field.get(1, i, j));
            by_vehicle.entry(&p.vehicle_id).or_default().push(p);
        }
        for path in by_vehicle.values() {
            for w in path.windows(2) {
                assert!(w[1].t > w[0].t && w[1].s > w[0].s);
            }
        }
        // no overtaking: at shared sample times the earlier vehicle is ahead
        let mut at_time: HashMap<(u32, i64), Vec<(&str, f64)>> = HashMap::new();
        for p in &pts {
            at_time.entry((p.lane, p.t.round() as i64)).or_default().push((&p.vehicle_id, p.s));
        }
        for v in at_time.values_mut() {
            v.sort_by(|a, b| a.0.cmp(b.0));
            for w in v.windows(2) {
                assert!(w[0].1 > w[1].1, "{:?}", w);
            }
        }
    }

    #[test]
    fn dense_synthesis_recovers_field() {
        let scn = one_band(1.0);
        let field = generate_field(&scn, 5).unwrap();
        let pts = trajectories_in_field(&scn, &field, 500, 5).unwrap();
        let agg = aggregate_to_grid(&pts, &scn.grid);
        let (mut err, mut n) = (0.0, 0);
        for (a, t) in agg.values.iter().zip(&field.values) {
            if let (Some(a), Some(t)) = (a, t) {
                err += (a - t).abs();
                n += 1;
            }
        }
        assert!(n > scn.grid.len() / 4, "{n} cells covered");
        assert!(err / (n as f64) < scn.noise_std);
    }
}
