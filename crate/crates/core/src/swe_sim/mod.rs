//! Structured-grid shallow-water solver producing snapshot sets.

mod config;
mod grid;
mod solver;
pub mod stencil;

use std::io::{Read, Write};

pub use config::{
    BathymetryConfig, BoundaryConfig, CoriolisMode, GridConfig, IcConfig, Island, PhysicsConfig,
    RunConfig, SimConfig, Spacing,
};
pub use grid::{EdgeKind, Edges, Grid, EARTH_RADIUS_M, EARTH_ROTATION};
pub use solver::{cfl_limit, step, FlowState, Solver};

use crate::binio::*;
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 7] = b"RPSNAP1";

/// Gaussian uplift of the sea surface at rest:
/// `h = rest depth + mag * amplitude * exp(-r^2 / 2 sigma^2)`, `u = v = 0`.
///
/// Land cells are left dry.
pub fn gaussian_initial_condition(
    grid: &Grid,
    lon0: f64,
    lat0: f64,
    mag: f64,
    sigma_m: f64,
    amplitude: f64,
) -> Result<FlowState> {
    if !(mag > 0.0 && mag.is_finite()) {
        return Err(Error::domain(format!(
            "magnitude factor must be positive, got {mag}"
        )));
    }
    if !(sigma_m > 0.0 && amplitude > 0.0) {
        return Err(Error::domain(
            "Gaussian width and amplitude must be positive",
        ));
    }
    let (ie, je) = grid.locate(lon0, lat0).ok_or_else(|| {
        Error::domain(format!("epicentre ({lon0}, {lat0}) lies outside the grid"))
    })?;
    if !grid.is_wet(grid.idx(ie, je)) {
        return Err(Error::domain(format!(
            "epicentre ({lon0}, {lat0}) lies on land"
        )));
    }
    let mut state = FlowState::rest(grid);
    let peak = mag * amplitude;
    let inv = 1.0 / (2.0 * sigma_m * sigma_m);
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let c = grid.idx(i, j);
            if !grid.is_wet(c) {
                continue;
            }
            let (x, y) = grid.metric_offset(i, j, lon0, lat0);
            state.h[c] += peak * (-(x * x + y * y) * inv).exp();
        }
    }
    Ok(state)
}

/// Initial condition described by a config.
pub fn initial_condition(config: &SimConfig, grid: &Grid) -> Result<FlowState> {
    let ic = &config.ic;
    gaussian_initial_condition(
        grid,
        ic.lon0,
        ic.lat0,
        ic.mag,
        ic.sigma_km * 1e3,
        ic.amplitude,
    )
}

/// Recorded frames of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub grid: Grid,
    pub times: Vec<f64>,
    pub states: Vec<FlowState>,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.states.len() {
            return Err(Error::structural("times and states differ in length"));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::structural(
                "snapshot times must be strictly increasing",
            ));
        }
        let n = self.grid.len();
        if self
            .states
            .iter()
            .any(|s| s.h.len() != n || s.u.len() != n || s.v.len() != n)
        {
            return Err(Error::structural("frame size does not match the grid"));
        }
        Ok(())
    }

    /// Encode in the `RPSNAP1` little-endian layout.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.validate()?;
        let g = &self.grid;
        write_magic(w, SNAPSHOT_MAGIC)?;
        write_u32(w, to_u32(g.nx, "nx")?)?;
        write_u32(w, to_u32(g.ny, "ny")?)?;
        write_u32(w, to_u32(self.len(), "n_t")?)?;
        write_u32(w, 3)?;
        write_f64(w, g.dx)?;
        write_f64(w, g.dy)?;
        write_f64(w, g.gravity)?;
        write_f64s(w, &g.bathymetry)?;
        for (t, s) in self.times.iter().zip(&self.states) {
            write_f64(w, *t)?;
            write_f64s(w, &s.h)?;
            write_f64s(w, &s.u)?;
            write_f64s(w, &s.v)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    /// Decode an `RPSNAP1` stream. The file carries only spacing, gravity and
    /// bathymetry, so the caller supplies the full grid; a mismatch is a
    /// structural error.
    pub fn read_from<R: Read>(r: &mut R, grid: &Grid) -> Result<SnapshotSet> {
        expect_magic(r, SNAPSHOT_MAGIC)?;
        let nx = read_u32(r)? as usize;
        let ny = read_u32(r)? as usize;
        let nt = read_u32(r)? as usize;
        let nf = read_u32(r)?;
        if nf != 3 {
            return Err(Error::format(format!("expected 3 fields, found {nf}")));
        }
        let dx = read_f64(r)?;
        let dy = read_f64(r)?;
        let g = read_f64(r)?;
        let n = nx * ny;
        let zb = read_f64s(r, n)?;
        if nx != grid.nx || ny != grid.ny || dx != grid.dx || dy != grid.dy || g != grid.gravity {
            return Err(Error::structural(format!(
                "snapshot grid {nx}x{ny} (dx={dx}, dy={dy}, g={g}) does not match configured grid {}x{} (dx={}, dy={}, g={})",
                grid.nx, grid.ny, grid.dx, grid.dy, grid.gravity
            )));
        }
        if zb != grid.bathymetry {
            return Err(Error::structural(
                "snapshot bathymetry differs from configured grid",
            ));
        }
        let mut times = Vec::with_capacity(nt);
        let mut states = Vec::with_capacity(nt);
        for _ in 0..nt {
            let t = read_f64(r)?;
            let h = read_f64s(r, n)?;
            let u = read_f64s(r, n)?;
            let v = read_f64s(r, n)?;
            times.push(t);
            states.push(FlowState { h, u, v, t });
        }
        let set = SnapshotSet {
            grid: grid.clone(),
            times,
            states,
        };
        set.validate()?;
        Ok(set)
    }
}

/// Run a full simulation and record frames at the configured cadence.
///
/// The solver step is the largest CFL-admissible step that divides the
/// cadence evenly, so frames land exactly on `k * cadence`.
pub fn run_simulation(config: &SimConfig) -> Result<SnapshotSet> {
    let grid = config.build_grid()?;
    let n_frames = config.frame_count()?;
    let initial = initial_condition(config, &grid)?;
    simulate_from(&grid, initial, n_frames, config.run.cadence, config.run.cfl)
}

/// Integrate from a given state, recording `n_frames` frames after the initial one.
pub fn simulate_from(
    grid: &Grid,
    initial: FlowState,
    n_frames: usize,
    cadence: f64,
    cfl: f64,
) -> Result<SnapshotSet> {
    let mut solver = Solver::new(grid, cfl)?;
    let mut state = initial;
    let t0 = state.t;
    let mut times = vec![t0];
    let mut states = vec![state.clone()];
    if n_frames > 0 {
        // headroom for the wave crest above the initial maximum depth
        let limit = 0.95 * solver.dt_limit(&state);
        let sub = (cadence / limit).ceil().max(1.0) as usize;
        let dt = cadence / sub as f64;
        for frame in 1..=n_frames {
            for _ in 0..sub {
                solver.step(&mut state, dt)?;
            }
            let t = t0 + frame as f64 * cadence;
            state.t = t;
            times.push(t);
            states.push(state.clone());
        }
    }
    Ok(SnapshotSet {
        grid: grid.clone(),
        times,
        states,
    })
}
