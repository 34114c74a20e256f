use super::grid::Grid;
use super::stencil::{ddx, ddy, Parity};
use crate::error::{Error, Result};

/// Water thickness and depth-averaged velocities at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub h: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub t: f64,
}

impl FlowState {
    /// Quiescent ocean: `h = -z_b` on wet cells, zero on land.
    pub fn rest(grid: &Grid) -> FlowState {
        let n = grid.len();
        FlowState {
            h: (0..n).map(|c| grid.rest_depth(c)).collect(),
            u: vec![0.0; n],
            v: vec![0.0; n],
            t: 0.0,
        }
    }

    /// Surface anomaly `eta = h + z_b` on wet cells (zero on land).
    pub fn eta(&self, grid: &Grid) -> Vec<f64> {
        (0..grid.len())
            .map(|c| {
                if grid.is_wet(c) {
                    self.h[c] + grid.bathymetry[c]
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Total water volume `sum(h) dx dy`.
    pub fn volume(&self, grid: &Grid) -> f64 {
        self.h.iter().sum::<f64>() * grid.cell_area()
    }

    fn check_finite(&self, step: usize) -> Result<()> {
        for (name, f) in [("h", &self.h), ("u", &self.u), ("v", &self.v)] {
            if f.iter().any(|x| !x.is_finite()) {
                return Err(Error::Integration { field: name, step });
            }
        }
        Ok(())
    }
}

/// Largest stable time step `cfl * min(dx, dy) / sqrt(g h_max)`.
pub fn cfl_limit(grid: &Grid, h_max: f64, cfl: f64) -> f64 {
    if h_max <= 0.0 {
        return f64::INFINITY;
    }
    cfl * grid.dx.min(grid.dy) / (grid.gravity * h_max).sqrt()
}

/// Scratch buffers for tendency evaluation.
struct Work {
    eta: Vec<f64>,
    flux: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
    ue: Vec<f64>,
    ve: Vec<f64>,
}

impl Work {
    fn new(n: usize) -> Self {
        Work {
            eta: vec![0.0; n],
            flux: vec![0.0; n],
            d1: vec![0.0; n],
            d2: vec![0.0; n],
            ue: vec![0.0; n],
            ve: vec![0.0; n],
        }
    }
}

/// Right-hand side of the discretised shallow-water system:
///
/// ```text
/// h_t = -(d(hu)/dx + d(hv)/dy)
/// u_t = -(u u_x + v u_y) + f v - g eta_x - c_d |V| u / h
/// v_t = -(u v_x + v v_y) - f u - g eta_y - c_d |V| v / h
/// ```
///
/// plus sponge relaxation toward rest where configured.
fn tendency(
    grid: &Grid,
    s: &FlowState,
    w: &mut Work,
    dh: &mut [f64],
    du: &mut [f64],
    dv: &mut [f64],
) {
    let n = grid.len();
    let g = grid.gravity;
    for c in 0..n {
        if grid.is_wet(c) {
            w.eta[c] = s.h[c] + grid.bathymetry[c];
            let dry = s.h[c] < grid.h_min;
            w.ue[c] = if dry { 0.0 } else { s.u[c] };
            w.ve[c] = if dry { 0.0 } else { s.v[c] };
        } else {
            w.eta[c] = 0.0;
            w.ue[c] = 0.0;
            w.ve[c] = 0.0;
        }
    }

    // continuity
    for c in 0..n {
        w.flux[c] = s.h[c] * w.ue[c];
    }
    ddx(grid, &w.flux, Parity::Odd, &mut w.d1);
    for c in 0..n {
        w.flux[c] = s.h[c] * w.ve[c];
    }
    ddy(grid, &w.flux, Parity::Odd, &mut w.d2);
    for c in 0..n {
        dh[c] = -(w.d1[c] + w.d2[c]);
    }

    // x-momentum
    ddx(grid, &w.ue, Parity::Odd, &mut w.d1);
    ddy(grid, &w.ue, Parity::Even, &mut w.d2);
    for c in 0..n {
        du[c] = -(w.ue[c] * w.d1[c] + w.ve[c] * w.d2[c]) + grid.coriolis[c] * w.ve[c];
    }
    ddx(grid, &w.eta, Parity::Even, &mut w.d1);
    for c in 0..n {
        du[c] -= g * w.d1[c];
    }

    // y-momentum
    ddx(grid, &w.ve, Parity::Even, &mut w.d1);
    ddy(grid, &w.ve, Parity::Odd, &mut w.d2);
    for c in 0..n {
        dv[c] = -(w.ue[c] * w.d1[c] + w.ve[c] * w.d2[c]) - grid.coriolis[c] * w.ue[c];
    }
    ddy(grid, &w.eta, Parity::Even, &mut w.d1);
    for c in 0..n {
        dv[c] -= g * w.d1[c];
    }

    for c in 0..n {
        if !grid.is_wet(c) {
            dh[c] = 0.0;
            du[c] = 0.0;
            dv[c] = 0.0;
            continue;
        }
        if grid.drag > 0.0 && s.h[c] >= grid.h_min {
            let speed = (w.ue[c] * w.ue[c] + w.ve[c] * w.ve[c]).sqrt();
            let k = grid.drag * speed / s.h[c];
            du[c] -= k * w.ue[c];
            dv[c] -= k * w.ve[c];
        }
        let sp = grid.sponge[c];
        if sp > 0.0 {
            dh[c] -= sp * w.eta[c];
            du[c] -= sp * w.ue[c];
            dv[c] -= sp * w.ve[c];
        }
    }
}

/// Classical RK4 integrator with reusable buffers.
pub struct Solver<'g> {
    grid: &'g Grid,
    cfl: f64,
    steps_taken: usize,
    work: Work,
    k: [[Vec<f64>; 3]; 4],
    stage: FlowState,
}

impl<'g> Solver<'g> {
    pub fn new(grid: &'g Grid, cfl: f64) -> Result<Self> {
        grid.validate()?;
        if !(cfl > 0.0 && cfl.is_finite()) {
            return Err(Error::config(format!("cfl must be positive, got {cfl}")));
        }
        let n = grid.len();
        let zero = || [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        Ok(Solver {
            grid,
            cfl,
            steps_taken: 0,
            work: Work::new(n),
            k: [zero(), zero(), zero(), zero()],
            stage: FlowState::rest(grid),
        })
    }

    pub fn grid(&self) -> &Grid {
        self.grid
    }

    /// Evaluate the tendency `(dh, du, dv)` of a state.
    pub fn tendency(&mut self, state: &FlowState) -> [Vec<f64>; 3] {
        let n = self.grid.len();
        let (mut dh, mut du, mut dv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        tendency(self.grid, state, &mut self.work, &mut dh, &mut du, &mut dv);
        [dh, du, dv]
    }

    /// CFL limit for the given state.
    pub fn dt_limit(&self, state: &FlowState) -> f64 {
        let h_max = (0..self.grid.len())
            .filter(|&c| self.grid.is_wet(c))
            .map(|c| state.h[c])
            .fold(0.0, f64::max);
        cfl_limit(self.grid, h_max, self.cfl)
    }

    /// Advance one RK4 step in place.
    pub fn step(&mut self, state: &mut FlowState, dt: f64) -> Result<()> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::domain(format!(
                "time step must be positive, got {dt}"
            )));
        }
        let h_max = (0..self.grid.len())
            .filter(|&c| self.grid.is_wet(c))
            .map(|c| state.h[c])
            .fold(0.0, f64::max);
        let limit = cfl_limit(self.grid, h_max, self.cfl);
        if dt > limit {
            return Err(Error::Cfl { dt, limit, h_max });
        }
        let grid = self.grid;
        let n = grid.len();
        let weights = [0.5 * dt, 0.5 * dt, dt];

        for s in 0..4 {
            if s == 0 {
                let [kh, ku, kv] = &mut self.k[0];
                tendency(grid, state, &mut self.work, kh, ku, kv);
            } else {
                let a = weights[s - 1];
                {
                    let prev = &self.k[s - 1];
                    for c in 0..n {
                        self.stage.h[c] = state.h[c] + a * prev[0][c];
                        self.stage.u[c] = state.u[c] + a * prev[1][c];
                        self.stage.v[c] = state.v[c] + a * prev[2][c];
                    }
                }
                let [kh, ku, kv] = &mut self.k[s];
                tendency(grid, &self.stage, &mut self.work, kh, ku, kv);
            }
        }

        let w6 = dt / 6.0;
        let k = &self.k;
        for c in 0..n {
            state.h[c] += w6 * (k[0][0][c] + 2.0 * k[1][0][c] + 2.0 * k[2][0][c] + k[3][0][c]);
            state.u[c] += w6 * (k[0][1][c] + 2.0 * k[1][1][c] + 2.0 * k[2][1][c] + k[3][1][c]);
            state.v[c] += w6 * (k[0][2][c] + 2.0 * k[1][2][c] + 2.0 * k[2][2][c] + k[3][2][c]);
        }
        for c in 0..n {
            if !grid.is_wet(c) || state.h[c] < grid.h_min {
                state.u[c] = 0.0;
                state.v[c] = 0.0;
            }
        }
        state.t += dt;
        self.steps_taken += 1;
        state.check_finite(self.steps_taken)
    }
}

/// Advance a state by one RK4 step. Allocates scratch space on every call;
/// use [`Solver`] for repeated stepping.
pub fn step(state: &FlowState, grid: &Grid, dt: f64, cfl: f64) -> Result<FlowState> {
    let mut solver = Solver::new(grid, cfl)?;
    let mut next = state.clone();
    solver.step(&mut next, dt)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::swe_sim::grid::{EdgeKind, Edges};

    fn bumpy_grid() -> Grid {
        let mut g = Grid::planar(24, 20, 5_000.0, 5_000.0, 1000.0).unwrap();
        for c in 0..g.len() {
            let (i, j) = ((c % g.nx) as f64, (c / g.nx) as f64);
            g.bathymetry[c] = -1000.0 + 300.0 * (0.4 * i).sin() * (0.3 * j).cos();
        }
        // an island
        let isl = g.idx(10, 10);
        g.bathymetry[isl] = 20.0;
        g.coriolis.iter_mut().for_each(|f| *f = -5e-5);
        g
    }

    #[test]
    fn rest_state_is_a_fixed_point_over_non_flat_bathymetry() {
        let g = bumpy_grid();
        let mut solver = Solver::new(&g, 0.5).unwrap();
        let mut s = FlowState::rest(&g);
        let dt = 0.9 * solver.dt_limit(&s);
        for _ in 0..100 {
            solver.step(&mut s, dt).unwrap();
        }
        let umax = s.u.iter().chain(&s.v).fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(umax < 1e-12, "max |velocity| = {umax}");
        assert!(s.eta(&g).iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let g = bumpy_grid();
        let mut solver = Solver::new(&g, 0.5).unwrap();
        let mut s = FlowState::rest(&g);
        let limit = solver.dt_limit(&s);
        match solver.step(&mut s, 2.0 * limit) {
            Err(Error::Cfl { .. }) => {}
            other => panic!("expected CFL error, got {other:?}"),
        }
    }

    #[test]
    fn nan_is_reported_with_field_name() {
        let g = bumpy_grid();
        let mut solver = Solver::new(&g, 0.5).unwrap();
        let mut s = FlowState::rest(&g);
        s.u[g.idx(3, 3)] = f64::NAN;
        let dt = 0.5 * solver.dt_limit(&s);
        match solver.step(&mut s, dt) {
            Err(Error::Integration { step: 1, .. }) => {}
            other => panic!("expected integration error, got {other:?}"),
        }
    }

    #[test]
    fn drag_dissipates_a_uniform_current() {
        let mut g = Grid::planar(8, 8, 1000.0, 1000.0, 10.0).unwrap();
        g.edges = Edges {
            x: EdgeKind::Periodic,
            y: EdgeKind::Periodic,
        };
        g.drag = 0.01;
        let mut s = FlowState::rest(&g);
        s.u.iter_mut().for_each(|u| *u = 1.0);
        let next = step(&s, &g, 1.0, 0.5).unwrap();
        // du/dt = -c_d u^2 / h, so u(1) = 1 / (1 + 1e-3)
        for c in 0..g.len() {
            assert!((next.u[c] - 1.0 / 1.001).abs() < 1e-12, "u = {}", next.u[c]);
            assert_eq!(next.h[c], 10.0);
        }
    }
}
