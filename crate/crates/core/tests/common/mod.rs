//! Oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use randprom::galerkin::{integrate, RomOperators};
use randprom::ngp::{evaluate, gradient, NgpModel, TrainSettings};
use randprom::pod::ModalBasis;
use randprom::swe_sim::stencil::{ddx, ddy, Parity};
use randprom::swe_sim::{
    gaussian_initial_condition, simulate_from, EdgeKind, Edges, FlowState, Grid, Solver,
};

pub fn random_ops(k: usize, rng: &mut ChaCha8Rng) -> RomOperators {
    let mut ops = RomOperators::zeros(k);
    for x in ops.c.iter_mut().chain(&mut ops.l).chain(&mut ops.q) {
        *x = rng.random_range(-1.0..1.0);
    }
    ops
}

pub fn loop_rhs(a: &[f64], ops: &RomOperators) -> Vec<f64> {
    let k = ops.k;
    let mut out = vec![0.0; k];
    for m in 0..k {
        let mut s = ops.c[m];
        for i in 0..k {
            s += a[i] * ops.l_at(i, m);
        }
        for i in 0..k {
            for j in 0..k {
                s += a[i] * a[j] * ops.q_at(i, j, m);
            }
        }
        out[m] = s;
    }
    out
}

pub fn blocks(v: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    (v[..n].to_vec(), v[n..2 * n].to_vec(), v[2 * n..].to_vec())
}

pub fn dx(g: &Grid, f: &[f64], p: Parity) -> Vec<f64> {
    let mut o = vec![0.0; f.len()];
    ddx(g, f, p, &mut o);
    o
}

pub fn dy(g: &Grid, f: &[f64], p: Parity) -> Vec<f64> {
    let mut o = vec![0.0; f.len()];
    ddy(g, f, p, &mut o);
    o
}

pub fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn inner(g: &Grid, a: &[f64], b: &[f64]) -> f64 {
    (0..g.len())
        .filter(|&c| g.is_wet(c))
        .map(|c| a[c] * b[c])
        .sum()
}

/// Per-field quadratic integrands of the element formulas, summed against mode m.
pub fn brute_q(g: &Grid, pi: &[f64], pj: &[f64], pm: &[f64]) -> f64 {
    let n = g.len();
    let (hi, ui, vi) = blocks(pi, n);
    let (_, uj, vj) = blocks(pj, n);
    let (hm, um, vm) = blocks(pm, n);
    let ih: Vec<f64> = dx(g, &mul(&hi, &uj), Parity::Odd)
        .iter()
        .zip(dy(g, &mul(&hi, &vj), Parity::Odd))
        .map(|(a, b)| -(a + b))
        .collect();
    let iu: Vec<f64> = (0..n)
        .map(|c| -(ui[c] * dx(g, &uj, Parity::Odd)[c] + vi[c] * dy(g, &uj, Parity::Even)[c]))
        .collect();
    let iv: Vec<f64> = (0..n)
        .map(|c| -(ui[c] * dx(g, &vj, Parity::Even)[c] + vi[c] * dy(g, &vj, Parity::Odd)[c]))
        .collect();
    inner(g, &ih, &hm) + inner(g, &iu, &um) + inner(g, &iv, &vm)
}

/// Per-field linearised integrands about the mean flow, summed against mode m.
pub fn brute_l(g: &Grid, mean: &[f64], pi: &[f64], pm: &[f64]) -> f64 {
    let n = g.len();
    let (hb, ub, vb) = blocks(mean, n);
    let (hi, ui, vi) = blocks(pi, n);
    let (hm, um, vm) = blocks(pm, n);
    let fx = (0..n)
        .map(|c| hb[c] * ui[c] + hi[c] * ub[c])
        .collect::<Vec<_>>();
    let fy = (0..n)
        .map(|c| hb[c] * vi[c] + hi[c] * vb[c])
        .collect::<Vec<_>>();
    let (dfx, dfy) = (dx(g, &fx, Parity::Odd), dy(g, &fy, Parity::Odd));
    let (ubx, uby, vbx, vby) = (
        dx(g, &ub, Parity::Odd),
        dy(g, &ub, Parity::Even),
        dx(g, &vb, Parity::Even),
        dy(g, &vb, Parity::Odd),
    );
    let (uix, uiy, vix, viy) = (
        dx(g, &ui, Parity::Odd),
        dy(g, &ui, Parity::Even),
        dx(g, &vi, Parity::Even),
        dy(g, &vi, Parity::Odd),
    );
    let (hx, hy) = (dx(g, &hi, Parity::Even), dy(g, &hi, Parity::Even));
    let mut s = 0.0;
    for c in 0..n {
        if !g.is_wet(c) {
            continue;
        }
        let (f, sp, gr) = (g.coriolis[c], g.sponge[c], g.gravity);
        let ih = -(dfx[c] + dfy[c]) - sp * hi[c];
        let iu = -(ub[c] * uix[c] + ui[c] * ubx[c] + vb[c] * uiy[c] + vi[c] * uby[c]) + f * vi[c]
            - gr * hx[c]
            - sp * ui[c];
        let iv = -(ub[c] * vix[c] + ui[c] * vbx[c] + vb[c] * viy[c] + vi[c] * vby[c])
            - f * ui[c]
            - gr * hy[c]
            - sp * vi[c];
        s += ih * hm[c] + iu * um[c] + iv * vm[c];
    }
    s
}

pub fn col(b: &ModalBasis, i: usize) -> Vec<f64> {
    b.modes.column(i).iter().copied().collect()
}

pub fn stable_ops(k: usize, rng: &mut ChaCha8Rng) -> RomOperators {
    let mut ops = RomOperators::zeros(k);
    for x in ops.c.iter_mut() {
        *x = rng.random_range(-0.05..0.05);
    }
    for i in 0..k {
        for m in 0..k {
            ops.l[i * k + m] = if i == m {
                -0.3
            } else {
                rng.random_range(-0.5..0.5)
            };
        }
    }
    for x in ops.q.iter_mut() {
        *x = rng.random_range(-0.2..0.2);
    }
    ops
}

pub fn settings(dt: f64, substeps: usize) -> TrainSettings {
    TrainSettings {
        dt,
        substeps,
        lambda: 0.7,
        horizon_factor: 2.0,
        rho: 0.3,
        ..Default::default()
    }
}

/// Largest relative gap between the adjoint gradient and central differences.
pub fn fd_max_rel_error(k: usize, seed: u64, substeps: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops = stable_ops(k, &mut rng);
    let truth = stable_ops(k, &mut rng);
    let a0: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target = integrate(&truth, &a0, 0.25, 12).unwrap();
    let s = settings(0.25, substeps);
    let mut model = NgpModel::identity(ops, &s);
    // move away from the all-ones point so the check is generic
    for p in model
        .params
        .l_nn
        .iter_mut()
        .chain(model.params.q_nn.iter_mut())
    {
        *p += rng.random_range(-0.2..0.2);
    }
    let g = gradient(&model, &target, &s).unwrap();
    assert!(g.loss.penalty > 0.0, "penalty branch should be active");
    let eps = 1e-6;
    let n_l = k * k;
    let mut fd = Vec::new();
    for idx in 0..n_l + k * k * k {
        let mut plus = model.clone();
        let mut minus = model.clone();
        if idx < n_l {
            plus.params.l_nn[idx] += eps;
            minus.params.l_nn[idx] -= eps;
        } else {
            plus.params.q_nn[idx - n_l] += eps;
            minus.params.q_nn[idx - n_l] -= eps;
        }
        fd.push(
            (evaluate(&plus, &target, &s).total - evaluate(&minus, &target, &s).total)
                / (2.0 * eps),
        );
    }
    let adj: Vec<f64> = g.l_nn.iter().chain(&g.q_nn).copied().collect();
    let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    adj.iter()
        .zip(&fd)
        .map(|(a, f)| (a - f).abs() / f.abs().max(1e-3 * scale))
        .fold(0.0, f64::max)
}

pub fn closed_basin(n: usize) -> Grid {
    Grid::planar(n, n, 20_000.0, 20_000.0, 2000.0).unwrap()
}

pub fn centred_bump(g: &Grid, mag: f64) -> FlowState {
    // epicentre at the exact domain centre (a cell corner for even n)
    let lon = g.lon_min + 0.5 * g.nx as f64 * g.dlon;
    let lat = g.lat_min + 0.5 * g.ny as f64 * g.dlat;
    gaussian_initial_condition(g, lon, lat, mag, 80_000.0, 1.0).unwrap()
}

/// Largest eta and velocity mismatch under the square's symmetries after
/// `steps` steps of a centred bump in an n x n closed basin without rotation.
pub fn d4_asymmetry(n: usize, steps: usize) -> (f64, f64) {
    let g = closed_basin(n);
    let mut s = centred_bump(&g, 1.0);
    let mut solver = Solver::new(&g, 0.5).unwrap();
    let dt = 0.9 * solver.dt_limit(&s);
    for _ in 0..steps {
        solver.step(&mut s, dt).unwrap();
    }
    let eta = s.eta(&g);
    let mut asym: f64 = 0.0;
    let mut vel_asym: f64 = 0.0;
    for j in 0..n {
        for i in 0..n {
            let c = g.idx(i, j);
            // 90 degree rotation (i, j) -> (n-1-j, i): velocity (u, v) -> (-v, u)
            let r = g.idx(n - 1 - j, i);
            asym = asym.max((eta[c] - eta[r]).abs());
            vel_asym = vel_asym
                .max((s.u[r] + s.v[c]).abs())
                .max((s.v[r] - s.u[c]).abs());
            // reflection about the x mid-line
            let m = g.idx(n - 1 - i, j);
            asym = asym.max((eta[c] - eta[m]).abs());
            // diagonal transpose
            let t = g.idx(j, i);
            asym = asym.max((eta[c] - eta[t]).abs());
        }
    }
    (asym, vel_asym)
}

/// Measured speed of a small plane wave over flat bed of `depth`, and sqrt(gH).
pub fn plane_wave_speed(depth: f64) -> (f64, f64) {
    let mut g = Grid::planar(240, 12, 5_000.0, 5_000.0, depth).unwrap();
    g.edges = Edges {
        x: EdgeKind::Wall,
        y: EdgeKind::Periodic,
    };
    // the Gaussian source, stretched to a plane wave by periodicity in y
    let (lon0, _) = g.cell_center(20, 0);
    let mut s = FlowState::rest(&g);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let (x, _) = g.metric_offset(i, j, lon0, 0.0);
            let c = g.idx(i, j);
            s.h[c] += 0.01 * (-(x * x) / (2.0 * 30_000.0f64.powi(2))).exp();
        }
    }
    let probes = [90usize, 190];
    let set = simulate_from(&g, s, 1500, 10.0, 0.5).unwrap();
    let arrival = |pi: usize| -> f64 {
        let c = g.idx(pi, 5);
        let series: Vec<f64> = set.states.iter().map(|st| st.h[c] - depth).collect();
        let k = (1..series.len() - 1)
            .max_by(|&a, &b| series[a].total_cmp(&series[b]))
            .unwrap();
        // parabolic refinement of the peak time
        let (a, b, c) = (series[k - 1], series[k], series[k + 1]);
        let off = 0.5 * (a - c) / (a - 2.0 * b + c);
        set.times[k] + off * 10.0
    };
    let dist = (probes[1] - probes[0]) as f64 * g.dx;
    let speed = dist / (arrival(probes[1]) - arrival(probes[0]));
    (speed, (g.gravity * depth).sqrt())
}
