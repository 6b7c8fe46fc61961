//! Trajectory ingestion and spatiotemporal aggregation.
//!
//! Raw trajectory samples are binned onto a regular space x time (x lane)
//! grid. Cells use half-open intervals `[k*ds, (k+1)*ds)` so every in-window
//! sample lands in exactly one cell. Kernel coordinates default to cell
//! units (`s/ds`, `t/dt`); physical units are available as an option.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One trajectory sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub vehicle_id: String,
    /// Seconds.
    pub t: f64,
    /// Meters along the segment.
    pub s: f64,
    /// 1-based lane index.
    pub lane: u32,
    /// Meters per second.
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatioTemporalGrid {
    /// Cell length in meters.
    pub ds: f64,
    /// Cell duration in seconds.
    pub dt: f64,
    #[serde(rename = "S")]
    pub n_space: usize,
    #[serde(rename = "T")]
    pub n_time: usize,
    #[serde(rename = "L", default = "one")]
    pub n_lanes: usize,
    #[serde(default)]
    pub s_origin: f64,
    #[serde(default)]
    pub t_origin: f64,
}

fn one() -> usize {
    1
}

/// Coordinate system used for kernel inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateUnits {
    /// `(s/ds, t/dt)` relative to the grid origin.
    #[default]
    Cells,
    /// Meters and seconds relative to the grid origin.
    Physical,
}

impl SpatioTemporalGrid {
    pub fn new(ds: f64, dt: f64, n_space: usize, n_time: usize, n_lanes: usize) -> Result<Self> {
        let grid = Self {
            ds,
            dt,
            n_space,
            n_time,
            n_lanes,
            s_origin: 0.0,
            t_origin: 0.0,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn with_origin(mut self, s_origin: f64, t_origin: f64) -> Self {
        self.s_origin = s_origin;
        self.t_origin = t_origin;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ds.is_finite() && self.ds > 0.0) {
            return Err(Error::InvalidGrid(format!("ds must be positive, got {}", self.ds)));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidGrid(format!("dt must be positive, got {}", self.dt)));
        }
        if self.n_space == 0 || self.n_time == 0 || self.n_lanes == 0 {
            return Err(Error::InvalidGrid("S, T and L must all be at least 1".into()));
        }
        if !(self.s_origin.is_finite() && self.t_origin.is_finite()) {
            return Err(Error::InvalidGrid("origins must be finite".into()));
        }
        Ok(())
    }

    pub fn cells_per_lane(&self) -> usize {
        self.n_space * self.n_time
    }

    pub fn len(&self) -> usize {
        self.cells_per_lane() * self.n_lanes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of `(lane, space, time)` with a 1-based lane.
    pub fn index(&self, lane: u32, space: usize, time: usize) -> usize {
        debug_assert!(lane >= 1 && (lane as usize) <= self.n_lanes);
        ((lane as usize - 1) * self.n_space + space) * self.n_time + time
    }

    /// Inverse of [`index`](Self::index).
    pub fn unindex(&self, flat: usize) -> (u32, usize, usize) {
        let time = flat % self.n_time;
        let rest = flat / self.n_time;
        let space = rest % self.n_space;
        let lane = rest / self.n_space;
        (lane as u32 + 1, space, time)
    }

    /// Cell containing a physical position, if inside the window.
    pub fn locate(&self, s: f64, t: f64) -> Option<(usize, usize)> {
        let i = ((s - self.s_origin) / self.ds).floor();
        let j = ((t - self.t_origin) / self.dt).floor();
        if i >= 0.0 && j >= 0.0 && (i as usize) < self.n_space && (j as usize) < self.n_time {
            Some((i as usize, j as usize))
        } else {
            None
        }
    }

    pub fn contains_lane(&self, lane: u32) -> bool {
        lane >= 1 && (lane as usize) <= self.n_lanes
    }

    /// Kernel-space coordinates of the center of cell `(space, time)`.
    pub fn cell_center(&self, space: usize, time: usize, units: CoordinateUnits) -> [f64; 2] {
        let (cs, ct) = (space as f64 + 0.5, time as f64 + 0.5);
        match units {
            CoordinateUnits::Cells => [cs, ct],
            CoordinateUnits::Physical => [cs * self.ds, ct * self.dt],
        }
    }

    /// Upper corner of the domain in kernel coordinates (lower corner is the origin).
    pub fn extent(&self, units: CoordinateUnits) -> [f64; 2] {
        match units {
            CoordinateUnits::Cells => [self.n_space as f64, self.n_time as f64],
            CoordinateUnits::Physical => [
                self.n_space as f64 * self.ds,
                self.n_time as f64 * self.dt,
            ],
        }
    }

    /// Converts kernel coordinates to meters/seconds offsets from the origin.
    pub fn to_physical(&self, x: [f64; 2], units: CoordinateUnits) -> [f64; 2] {
        match units {
            CoordinateUnits::Cells => [x[0] * self.ds, x[1] * self.dt],
            CoordinateUnits::Physical => x,
        }
    }

    /// All cell centers of one lane, space-major.
    pub fn lane_inputs(&self, lane: u32, units: CoordinateUnits) -> Vec<crate::kernels::Input> {
        let mut out = Vec::with_capacity(self.cells_per_lane());
        for i in 0..self.n_space {
            for j in 0..self.n_time {
                out.push(crate::kernels::Input::new(self.cell_center(i, j, units), lane));
            }
        }
        out
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n_space == other.n_space
            && self.n_time == other.n_time
            && self.n_lanes == other.n_lanes
            && self.ds == other.ds
            && self.dt == other.dt
            && self.s_origin == other.s_origin
            && self.t_origin == other.t_origin
    }
}

/// Per-cell mean speeds. `counts` is present for aggregated data and absent for
/// model estimates; when present a value is missing iff its count is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedField {
    pub grid: SpatioTemporalGrid,
    pub values: Vec<Option<f64>>,
    pub counts: Option<Vec<u32>>,
}

impl SpeedField {
    pub fn empty(grid: SpatioTemporalGrid) -> Self {
        Self {
            grid,
            values: vec![None; grid.len()],
            counts: Some(vec![0; grid.len()]),
        }
    }

    /// A fully populated field without sample counts.
    pub fn dense(grid: SpatioTemporalGrid, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len(), "value count does not match grid");
        Self {
            grid,
            values: values.into_iter().map(Some).collect(),
            counts: None,
        }
    }

    pub fn get(&self, lane: u32, space: usize, time: usize) -> Option<f64> {
        self.values[self.grid.index(lane, space, time)]
    }

    pub fn count(&self, lane: u32, space: usize, time: usize) -> u32 {
        match &self.counts {
            Some(c) => c[self.grid.index(lane, space, time)],
            None => u32::from(self.get(lane, space, time).is_some()),
        }
    }

    pub fn n_present(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    /// Values of one lane as an `S x T` row-major matrix; missing cells are NaN.
    pub fn lane_matrix(&self, lane: u32) -> Vec<Vec<f64>> {
        (0..self.grid.n_space)
            .map(|i| {
                (0..self.grid.n_time)
                    .map(|j| self.get(lane, i, j).unwrap_or(f64::NAN))
                    .collect()
            })
            .collect()
    }

    /// Writes the field CSV (`lane,space_index,time_index,speed,count`, missing
    /// cells omitted). Estimates carry a count of 0.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["lane", "space_index", "time_index", "speed", "count"])?;
        for (flat, value) in self.values.iter().enumerate() {
            if let Some(v) = value {
                let (lane, i, j) = self.grid.unindex(flat);
                let count = self.counts.as_ref().map_or(0, |c| c[flat]);
                w.write_record([
                    lane.to_string(),
                    i.to_string(),
                    j.to_string(),
                    format_float(*v),
                    count.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("writing field csv", e))?;
        Ok(())
    }

    /// Reads a field CSV against a known grid. Counts are kept only if every
    /// row reports a positive count.
    pub fn read_csv<R: Read>(reader: R, grid: SpatioTemporalGrid) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut values = vec![None; grid.len()];
        let mut counts = vec![0u32; grid.len()];
        let mut all_counted = true;
        for (k, rec) in rdr.records().enumerate() {
            let row = k + 2;
            let rec = rec?;
            let field = |idx: usize| -> Result<&str> {
                rec.get(idx).ok_or_else(|| Error::MalformedRow {
                    row,
                    message: format!("missing column {idx}"),
                })
            };
            let parse_err = |what: &str| Error::MalformedRow {
                row,
                message: format!("cannot parse {what}"),
            };
            let lane: u32 = field(0)?.trim().parse().map_err(|_| parse_err("lane"))?;
            let i: usize = field(1)?.trim().parse().map_err(|_| parse_err("space_index"))?;
            let j: usize = field(2)?.trim().parse().map_err(|_| parse_err("time_index"))?;
            let v: f64 = field(3)?.trim().parse().map_err(|_| parse_err("speed"))?;
            let c: u32 = field(4)?.trim().parse().map_err(|_| parse_err("count"))?;
            if !grid.contains_lane(lane) || i >= grid.n_space || j >= grid.n_time {
                return Err(Error::MalformedRow {
                    row,
                    message: "cell outside grid".into(),
                });
            }
            let flat = grid.index(lane, i, j);
            values[flat] = Some(v);
            counts[flat] = c;
            if c == 0 {
                all_counted = false;
            }
        }
        Ok(Self {
            grid,
            values,
            counts: all_counted.then_some(counts),
        })
    }

    pub fn save(&self, csv_path: &Path, grid_json_path: &Path) -> Result<()> {
        let f = std::fs::File::create(csv_path)
            .map_err(|e| Error::io(format!("creating {}", csv_path.display()), e))?;
        self.write_csv(std::io::BufWriter::new(f))?;
        let json = serde_json::to_string_pretty(&self.grid)?;
        std::fs::write(grid_json_path, json + "\n")
            .map_err(|e| Error::io(format!("writing {}", grid_json_path.display()), e))?;
        Ok(())
    }

    pub fn load(csv_path: &Path, grid_json_path: &Path) -> Result<Self> {
        let grid_text = std::fs::read_to_string(grid_json_path)
            .map_err(|_| Error::MissingFile(grid_json_path.to_path_buf()))?;
        let grid: SpatioTemporalGrid = serde_json::from_str(&grid_text)?;
        grid.validate()?;
        let f = std::fs::File::open(csv_path).map_err(|_| Error::MissingFile(csv_path.to_path_buf()))?;
        Self::read_csv(std::io::BufReader::new(f), grid)
    }
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Observations in kernel coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationSet {
    pub x: Vec<[f64; 2]>,
    /// 1-based lane of each observation.
    pub lane: Vec<u32>,
    /// Speeds in m/s.
    pub y: Vec<f64>,
    pub units: CoordinateUnits,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn inputs(&self) -> Vec<crate::kernels::Input> {
        self.x
            .iter()
            .zip(&self.lane)
            .map(|(x, &l)| crate::kernels::Input::new(*x, l))
            .collect()
    }

    /// Observations of a single lane, in input order.
    pub fn select_lane(&self, lane: u32) -> ObservationSet {
        let mut out = ObservationSet {
            x: Vec::new(),
            lane: Vec::new(),
            y: Vec::new(),
            units: self.units,
        };
        for k in 0..self.len() {
            if self.lane[k] == lane {
                out.x.push(self.x[k]);
                out.lane.push(lane);
                out.y.push(self.y[k]);
            }
        }
        out
    }
}

/// Column names of the trajectory CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub vehicle_id: String,
    pub t: String,
    pub s: String,
    pub lane: String,
    pub speed: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            vehicle_id: "vehicle_id".into(),
            t: "t".into(),
            s: "s".into(),
            lane: "lane".into(),
            speed: "speed".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub points: Vec<TrajectoryPoint>,
    /// Rows that parsed but fell outside the grid window or lane range.
    pub dropped: usize,
}

/// Parses a trajectory CSV, keeping rows inside the grid window.
pub fn ingest_trajectories<R: Read>(
    source: R,
    schema: &CsvSchema,
    grid: &SpatioTemporalGrid,
) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MalformedRow {
                row: 1,
                message: format!("missing column '{name}'"),
            })
    };
    let (c_id, c_t, c_s, c_lane, c_speed) = (
        column(&schema.vehicle_id)?,
        column(&schema.t)?,
        column(&schema.s)?,
        column(&schema.lane)?,
        column(&schema.speed)?,
    );

    let mut points = Vec::new();
    let mut dropped = 0;
    for (k, rec) in rdr.records().enumerate() {
        // header is row 1
        let row = k + 2;
        let rec = rec.map_err(|e| Error::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        let get = |idx: usize, name: &str| -> Result<&str> {
            rec.get(idx).ok_or_else(|| Error::MalformedRow {
                row,
                message: format!("missing value for '{name}'"),
            })
        };
        let num = |idx: usize, name: &str| -> Result<f64> {
            let raw = get(idx, name)?;
            let v: f64 = raw.parse().map_err(|_| Error::MalformedRow {
                row,
                message: format!("'{name}' is not a number: '{raw}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::MalformedRow {
                    row,
                    message: format!("'{name}' is not finite"),
                });
            }
            Ok(v)
        };
        let vehicle_id = get(c_id, &schema.vehicle_id)?.to_string();
        let t = num(c_t, &schema.t)?;
        let s = num(c_s, &schema.s)?;
        let lane_raw = num(c_lane, &schema.lane)?;
        let speed = num(c_speed, &schema.speed)?;
        if lane_raw < 1.0 || lane_raw.fract() != 0.0 {
            return Err(Error::MalformedRow {
                row,
                message: format!("lane must be a positive integer, got {lane_raw}"),
            });
        }
        if speed < 0.0 {
            return Err(Error::MalformedRow {
                row,
                message: format!("negative speed {speed}"),
            });
        }
        let lane = lane_raw as u32;
        if grid.locate(s, t).is_none() || !grid.contains_lane(lane) {
            dropped += 1;
            continue;
        }
        points.push(TrajectoryPoint {
            vehicle_id,
            t,
            s,
            lane,
            speed,
        });
    }
    if points.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Ingested { points, dropped })
}

/// Writes points in the trajectory CSV format with the default column names.
pub fn write_trajectories<W: Write>(points: &[TrajectoryPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["vehicle_id", "t", "s", "lane", "speed"])?;
    for p in points {
        w.write_record([
            p.vehicle_id.clone(),
            format_float(p.t),
            format_float(p.s),
            p.lane.to_string(),
            format_float(p.speed),
        ])?;
    }
    w.flush().map_err(|e| Error::io("writing trajectories", e))?;
    Ok(())
}

/// Cell-wise arithmetic mean over samples. Points outside the grid are ignored.
pub fn aggregate_to_grid(points: &[TrajectoryPoint], grid: &SpatioTemporalGrid) -> SpeedField {
    let mut sums = vec![0.0; grid.len()];
    let mut counts = vec![0u32; grid.len()];
    for p in points {
        if !grid.contains_lane(p.lane) {
            continue;
        }
        if let Some((i, j)) = grid.locate(p.s, p.t) {
            let flat = grid.index(p.lane, i, j);
            sums[flat] += p.speed;
            counts[flat] += 1;
        }
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / f64::from(c)))
        .collect();
    SpeedField {
        grid: *grid,
        values,
        counts: Some(counts),
    }
}

/// Number of probe vehicles for a penetration rate. The small offset keeps
/// products such as `0.3 * 10` from rounding up past the exact integer.
pub fn probe_count(rate: f64, vehicles: usize) -> usize {
    let raw = rate * vehicles as f64;
    let k = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    k.clamp(1, vehicles)
}

/// Splits points into (observed, held-out) by drawing `ceil(rate * #vehicles)`
/// vehicles uniformly at random.
pub fn sample_penetration(
    points: &[TrajectoryPoint],
    rate: f64,
    seed: u64,
) -> Result<(Vec<TrajectoryPoint>, Vec<TrajectoryPoint>)> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidRate(rate));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for p in points {
        if seen.insert(p.vehicle_id.as_str()) {
            order.push(p.vehicle_id.as_str());
        }
    }
    if order.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = probe_count(rate, order.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: HashSet<&str> = index::sample(&mut rng, order.len(), k)
        .into_iter()
        .map(|i| order[i])
        .collect();
    let (observed, held_out) = points
        .iter()
        .cloned()
        .partition(|p| chosen.contains(p.vehicle_id.as_str()));
    Ok((observed, held_out))
}

/// One observation per present cell at the cell center, lane-major.
pub fn field_to_observations(
    field: &SpeedField,
    lane_filter: Option<&[u32]>,
    units: CoordinateUnits,
) -> Result<ObservationSet> {
    let grid = &field.grid;
    let mut obs = ObservationSet {
        x: Vec::new(),
        lane: Vec::new(),
        y: Vec::new(),
        units,
    };
    for lane in 1..=grid.n_lanes as u32 {
        if let Some(filter) = lane_filter {
            if !filter.contains(&lane) {
                continue;
            }
        }
        for i in 0..grid.n_space {
            for j in 0..grid.n_time {
                if let Some(v) = field.get(lane, i, j) {
                    obs.x.push(grid.cell_center(i, j, units));
                    obs.lane.push(lane);
                    obs.y.push(v);
                }
            }
        }
    }
    if obs.is_empty() {
        return Err(Error::EmptyObservations);
    }
    Ok(obs)
}

/// Number of distinct vehicles per lane.
pub fn vehicles_per_lane(points: &[TrajectoryPoint]) -> HashMap<u32, usize> {
    let mut sets: HashMap<u32, HashSet<&str>> = HashMap::new();
    for p in points {
        sets.entry(p.lane).or_default().insert(&p.vehicle_id);
    }
    sets.into_iter().map(|(k, v)| (k, v.len())).collect()
}
