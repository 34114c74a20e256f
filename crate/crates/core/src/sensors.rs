//! Sensor placement, sensor series and sparse-data masking.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calib::Scenario;
use crate::error::{Error, Result};
use crate::swe_sim::{Grid, SnapshotSet};

/// Default `|eta|` above which a sensor counts as active (m).
pub const DEFAULT_ACTIVITY_THRESHOLD: f64 = 0.01;

/// Rejection-sampling attempts allowed per requested sensor before giving up.
const ATTEMPTS_PER_SENSOR: usize = 100_000;

/// Cellwise maximum `|eta|` over a run; zero on land.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeMap {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl AmplitudeMap {
    pub fn max(&self) -> f64 {
        self.values.iter().fold(0.0, |m, &v| m.max(v))
    }
}

pub fn max_amplitude(snap: &SnapshotSet) -> Result<AmplitudeMap> {
    if snap.is_empty() {
        return Err(Error::domain("amplitude map of an empty snapshot set"));
    }
    let grid = &snap.grid;
    let mut values = vec![0.0; grid.len()];
    for state in &snap.states {
        for (c, v) in values.iter_mut().enumerate() {
            if grid.is_wet(c) {
                *v = f64::max(*v, (state.h[c] + grid.bathymetry[c]).abs());
            }
        }
    }
    Ok(AmplitudeMap {
        nx: grid.nx,
        ny: grid.ny,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Calibration,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    pub id: usize,
    pub lon: f64,
    pub lat: f64,
    pub i: usize,
    pub j: usize,
    pub role: Role,
}

/// Sensor locations on distinct wet cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SensorSet {
    pub sensors: Vec<Sensor>,
}

impl SensorSet {
    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    /// Flat grid indices in sensor order.
    pub fn cells(&self, grid: &Grid) -> Vec<usize> {
        self.sensors.iter().map(|s| grid.idx(s.i, s.j)).collect()
    }

    pub fn with_role(&self, role: Role) -> Vec<usize> {
        (0..self.len())
            .filter(|&s| self.sensors[s].role == role)
            .collect()
    }

    /// Sensors at the given positions, renumbered from zero.
    pub fn subset(&self, keep: &[usize]) -> SensorSet {
        SensorSet {
            sensors: keep
                .iter()
                .enumerate()
                .map(|(id, &s)| Sensor {
                    id,
                    ..self.sensors[s].clone()
                })
                .collect(),
        }
    }

    /// Checks that every sensor sits on a distinct wet cell of `grid`.
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.sensors {
            if s.i >= grid.nx || s.j >= grid.ny {
                return Err(Error::domain(format!(
                    "sensor {} at ({}, {}) is off the grid",
                    s.id, s.i, s.j
                )));
            }
            let c = grid.idx(s.i, s.j);
            if !grid.is_wet(c) {
                return Err(Error::domain(format!("sensor {} sits on land", s.id)));
            }
            if !seen.insert(c) {
                return Err(Error::domain(format!(
                    "sensor {} duplicates another location",
                    s.id
                )));
            }
        }
        Ok(())
    }

    /// Manifest CSV with columns id, lon, lat, i, j, role.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for s in &self.sensors {
            out.serialize(s)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<SensorSet> {
        let mut rd = csv::Reader::from_reader(r);
        let sensors = rd
            .deserialize()
            .collect::<std::result::Result<Vec<Sensor>, _>>()?;
        Ok(SensorSet { sensors })
    }
}

/// Draws `n` distinct wet cells by rejection: a uniform proposal over wet cells
/// is accepted with probability `value / max`, and repeats are redrawn.
pub fn sample_sensors<R: Rng + ?Sized>(
    map: &AmplitudeMap,
    grid: &Grid,
    n: usize,
    rng: &mut R,
) -> Result<SensorSet> {
    if map.values.len() != grid.len() {
        return Err(Error::structural("amplitude map does not match the grid"));
    }
    let wet: Vec<usize> = (0..grid.len()).filter(|&c| grid.is_wet(c)).collect();
    let top = wet.iter().fold(0.0f64, |m, &c| m.max(map.values[c]));
    if !(top > 0.0) || !top.is_finite() {
        return Err(Error::Placement(
            "amplitude map has no positive mass on wet cells".into(),
        ));
    }
    let support = wet.iter().filter(|&&c| map.values[c] > 0.0).count();
    if n > support {
        return Err(Error::Placement(format!(
            "{n} sensors requested but only {support} wet cells carry positive amplitude"
        )));
    }
    let mut taken = vec![false; grid.len()];
    let mut sensors = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while sensors.len() < n {
        attempts += 1;
        if attempts > ATTEMPTS_PER_SENSOR * n.max(1) {
            return Err(Error::Placement(format!(
                "rejection sampling stalled after {} sensors",
                sensors.len()
            )));
        }
        let c = wet[rng.random_range(0..wet.len())];
        let u: f64 = rng.random();
        if u * top >= map.values[c] || taken[c] {
            continue;
        }
        taken[c] = true;
        let (i, j) = (c % grid.nx, c / grid.nx);
        let (lon, lat) = grid.cell_center(i, j);
        sensors.push(Sensor {
            id: sensors.len(),
            lon,
            lat,
            i,
            j,
            role: Role::Calibration,
        });
    }
    Ok(SensorSet { sensors })
}

/// Sensor height series sampled at the snapshot times.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub times: Vec<f64>,
    pub n_sensors: usize,
    /// Row-major `[n_t x n_sensors]` surface elevation (m).
    pub values: Vec<f64>,
}

impl SeriesTable {
    pub fn n_t(&self) -> usize {
        self.times.len()
    }

    pub fn at(&self, t: usize, s: usize) -> f64 {
        self.values[t * self.n_sensors + s]
    }

    pub fn column(&self, s: usize) -> Vec<f64> {
        (0..self.n_t()).map(|t| self.at(t, s)).collect()
    }

    /// Fully observed scenario built from the table.
    pub fn to_scenario(&self, id: impl Into<String>) -> Scenario {
        Scenario::complete(id, self.times.clone(), self.n_sensors, self.values.clone())
    }
}

/// `eta(t)` at each sensor; zero at dry cells.
pub fn extract_series(snap: &SnapshotSet, sensors: &SensorSet) -> Result<SeriesTable> {
    let grid = &snap.grid;
    let mut cells = Vec::with_capacity(sensors.len());
    for s in &sensors.sensors {
        if s.i >= grid.nx || s.j >= grid.ny {
            return Err(Error::domain(format!(
                "sensor {} at ({}, {}) is off the grid",
                s.id, s.i, s.j
            )));
        }
        cells.push(grid.idx(s.i, s.j));
    }
    let mut values = Vec::with_capacity(snap.len() * cells.len());
    for state in &snap.states {
        for &c in &cells {
            values.push(if grid.is_wet(c) {
                state.h[c] + grid.bathymetry[c]
            } else {
                0.0
            });
        }
    }
    Ok(SeriesTable {
        times: snap.times.clone(),
        n_sensors: cells.len(),
        values,
    })
}

/// Fraction of samples with `|eta| > threshold`.
pub fn activity(series: &[f64], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::domain("activity threshold must be positive"));
    }
    if series.is_empty() {
        return Ok(0.0);
    }
    let active = series.iter().filter(|x| x.abs() > threshold).count();
    Ok(active as f64 / series.len() as f64)
}

/// Per-sensor activity of a table.
pub fn table_activity(table: &SeriesTable, threshold: f64) -> Result<Vec<f64>> {
    (0..table.n_sensors)
        .map(|s| activity(&table.column(s), threshold))
        .collect()
}

/// Index of the first sample with `|eta| > threshold`, if any.
pub fn first_arrival(series: &[f64], threshold: f64) -> Option<usize> {
    series.iter().position(|x| x.abs() > threshold)
}

/// Hides every observation later than `fraction` of the record span.
/// Values are kept so a larger cutoff can be restored from the original.
pub fn apply_cutoff(scenario: &Scenario, fraction: f64) -> Result<Scenario> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::domain(format!(
            "cutoff fraction {fraction} outside (0, 1]"
        )));
    }
    let mut out = scenario.clone();
    if scenario.times.is_empty() {
        return Ok(out);
    }
    let t0 = scenario.times[0];
    let span = scenario.times[scenario.times.len() - 1] - t0;
    let limit = t0 + fraction * span;
    for (t, &time) in scenario.times.iter().enumerate() {
        if time > limit * (1.0 + 1e-12) + 1e-12 {
            for s in 0..scenario.n_sensors {
                out.mask[t * scenario.n_sensors + s] = false;
            }
        }
    }
    Ok(out)
}

/// Marks `n_test` sensors, chosen uniformly at random, as held out.
pub fn holdout<R: Rng + ?Sized>(set: &SensorSet, n_test: usize, rng: &mut R) -> Result<SensorSet> {
    if n_test >= set.len() {
        return Err(Error::domain(format!(
            "cannot hold out {n_test} of {} sensors and keep one for calibration",
            set.len()
        )));
    }
    let mut out = set.clone();
    for s in &mut out.sensors {
        s.role = Role::Calibration;
    }
    for s in rand::seq::index::sample(rng, set.len(), n_test) {
        out.sensors[s].role = Role::Test;
    }
    Ok(out)
}

/// Positions of the `n_keep` most active sensors, most active first; ties
/// keep the original order.
pub fn most_active(activity: &[f64], n_keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..activity.len()).collect();
    order.sort_by(|&a, &b| activity[b].total_cmp(&activity[a]).then(a.cmp(&b)));
    order.truncate(n_keep);
    order
}

/// Picks `n` ensemble members from the extremes of total activity: members
/// are ranked by summed sensor activity and taken alternately from the least
/// and the most active end. Returned in ascending member order.
pub fn extreme_members(total_activity: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..total_activity.len()).collect();
    order.sort_by(|&a, &b| {
        total_activity[a]
            .total_cmp(&total_activity[b])
            .then(a.cmp(&b))
    });
    let n = n.min(order.len());
    let (mut lo, mut hi) = (0usize, order.len());
    let mut pick = Vec::with_capacity(n);
    while pick.len() < n {
        if pick.len() % 2 == 0 {
            pick.push(order[lo]);
            lo += 1;
        } else {
            hi -= 1;
            pick.push(order[hi]);
        }
    }
    pick.sort_unstable();
    pick
}
