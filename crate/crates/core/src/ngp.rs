//! Calibration of the GP-ROM through its ODE solve.
//!
//! The linear and quadratic operators are corrected elementwise,
//! `L <- L (.) L_nn`, `Q <- Q (.) Q_nn`, with the multipliers optimised so the
//! RK4 trajectory from `a0` tracks the POD coefficients. Gradients come from
//! the discrete adjoint of the RK4 scheme.

use std::io::{Read, Write};

use crate::binio::*;
use crate::error::{Error, Result};
use crate::galerkin::{
    integrate_parts, CoeffTrajectory, IntegrationSettings, Origin, RomOperators,
};

pub const NGP_MAGIC: &[u8; 6] = b"RPNGP1";

/// Hadamard multipliers and the loss hyperparameters they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct NgpParameters {
    /// Row-major `[k x k]`, same layout as [`RomOperators::l`].
    pub l_nn: Vec<f64>,
    /// Same layout as [`RomOperators::q`].
    pub q_nn: Vec<f64>,
    /// Weight of the stability penalty.
    pub lambda: f64,
    /// Length of the penalised trajectory as a multiple of the training window.
    pub horizon_factor: f64,
    /// The penalty starts at `rho * max_t |target(t)|_2`.
    pub rho: f64,
}

impl NgpParameters {
    /// All-ones multipliers: the identity under the Hadamard product.
    pub fn identity(k: usize, lambda: f64, horizon_factor: f64, rho: f64) -> NgpParameters {
        NgpParameters {
            l_nn: vec![1.0; k * k],
            q_nn: vec![1.0; k * k * k],
            lambda,
            horizon_factor,
            rho,
        }
    }
}

/// Loss history and summary of a training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingRecord {
    /// Total loss at every accepted iterate.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub best_loss: f64,
    /// Window MSE of the initial and best parameters.
    pub initial_mse: f64,
    pub best_mse: f64,
    pub iterations: usize,
    pub rejected_steps: usize,
    pub final_grad_norm: f64,
}

/// Base operators, trained multipliers and the training record.
#[derive(Debug, Clone, PartialEq)]
pub struct NgpModel {
    pub base: RomOperators,
    pub params: NgpParameters,
    pub record: TrainingRecord,
}

impl NgpModel {
    /// Untrained model wrapping `base` with all-ones multipliers.
    pub fn identity(base: RomOperators, settings: &TrainSettings) -> NgpModel {
        let k = base.k;
        NgpModel {
            base,
            params: NgpParameters::identity(
                k,
                settings.lambda,
                settings.horizon_factor,
                settings.rho,
            ),
            record: TrainingRecord::default(),
        }
    }

    pub fn k(&self) -> usize {
        self.base.k
    }

    /// `base (.) params`; recomputed from the stored parts every time.
    pub fn effective_operators(&self) -> RomOperators {
        let mut ops = self.base.clone();
        ops.l
            .iter_mut()
            .zip(&self.params.l_nn)
            .for_each(|(x, m)| *x *= m);
        ops.q
            .iter_mut()
            .zip(&self.params.q_nn)
            .for_each(|(x, m)| *x *= m);
        ops
    }

    /// Model file: the operator file followed by an `RPNGP1` section.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.base.write_to(w)?;
        let p = &self.params;
        let r = &self.record;
        write_magic(w, NGP_MAGIC)?;
        write_f64s(w, &p.l_nn)?;
        write_f64s(w, &p.q_nn)?;
        write_f64(w, p.lambda)?;
        write_f64(w, p.horizon_factor)?;
        write_f64(w, p.rho)?;
        write_f64(w, r.initial_loss)?;
        write_f64(w, r.best_loss)?;
        write_f64(w, r.initial_mse)?;
        write_f64(w, r.best_mse)?;
        write_f64(w, r.final_grad_norm)?;
        write_u32(w, to_u32(r.iterations, "iterations")?)?;
        write_u32(w, to_u32(r.rejected_steps, "rejected steps")?)?;
        write_u32(w, to_u32(r.losses.len(), "loss history")?)?;
        write_f64s(w, &r.losses)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<NgpModel> {
        let base = RomOperators::read_from(r)?;
        let k = base.k;
        expect_magic(r, NGP_MAGIC)?;
        let l_nn = read_f64s(r, k * k)?;
        let q_nn = read_f64s(r, k * k * k)?;
        let lambda = read_f64(r)?;
        let horizon_factor = read_f64(r)?;
        let rho = read_f64(r)?;
        let initial_loss = read_f64(r)?;
        let best_loss = read_f64(r)?;
        let initial_mse = read_f64(r)?;
        let best_mse = read_f64(r)?;
        let final_grad_norm = read_f64(r)?;
        let iterations = read_u32(r)? as usize;
        let rejected_steps = read_u32(r)? as usize;
        let n_hist = read_u32(r)? as usize;
        let losses = read_f64s(r, n_hist)?;
        Ok(NgpModel {
            base,
            params: NgpParameters {
                l_nn,
                q_nn,
                lambda,
                horizon_factor,
                rho,
            },
            record: TrainingRecord {
                losses,
                initial_loss,
                best_loss,
                initial_mse,
                best_mse,
                iterations,
                rejected_steps,
                final_grad_norm,
            },
        })
    }
}

/// RK4 trajectory of the corrected operators.
pub fn forward(
    model: &NgpModel,
    a0: &[f64],
    settings: &IntegrationSettings,
) -> Result<CoeffTrajectory> {
    let ops = model.effective_operators();
    integrate_parts(a0, &ops.c, &ops.l, &ops.q, ops.k, settings, Origin::Ngp)
}

/// Decomposed loss value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub mse: f64,
    /// Unweighted stability penalty.
    pub penalty: f64,
    /// `mse + lambda * penalty`.
    pub total: f64,
}

/// Largest Euclidean norm of any target row.
pub fn target_norm_max(target: &CoeffTrajectory) -> f64 {
    (0..target.len())
        .map(|t| norm2(target.row(t)))
        .fold(0.0, f64::max)
}

fn norm2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean squared error over the rows of `target` plus `lambda` times the mean
/// of `max(0, |a(t)|_2 - rho max|target|_2)^2` over the rows of `tail`.
pub fn loss(
    traj: &CoeffTrajectory,
    target: &CoeffTrajectory,
    lambda: f64,
    tail: &CoeffTrajectory,
    rho: f64,
) -> LossParts {
    let n = target.len().min(traj.len());
    let k = target.k;
    let mut se = 0.0;
    for t in 0..n {
        for (a, b) in traj.row(t).iter().zip(target.row(t)) {
            se += (a - b) * (a - b);
        }
    }
    let mse = if n > 0 { se / (n * k) as f64 } else { 0.0 };
    let bound = rho * target_norm_max(target);
    let mut pen = 0.0;
    for t in 0..tail.len() {
        let ex = (norm2(tail.row(t)) - bound).max(0.0);
        pen += ex * ex;
    }
    let penalty = if tail.is_empty() {
        0.0
    } else {
        pen / tail.len() as f64
    };
    LossParts {
        mse,
        penalty,
        total: mse + lambda * penalty,
    }
}

/// Training problem: the POD target over the training window and the time stepping.
///
/// The multipliers are generated as `L_nn = s_L M_L` and `Q_nn = s_Q M_Q`
/// with per-entry factors `M` and one shared factor per operator, all
/// starting at one. The shared factors get their own learning rate.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    /// Interval between target rows.
    pub dt: f64,
    /// RK4 steps per interval.
    pub substeps: usize,
    pub lambda: f64,
    pub horizon_factor: f64,
    pub rho: f64,
    /// Adam step size of the per-entry factors.
    pub learning_rate: f64,
    /// Adam step size of the shared factors.
    pub scale_learning_rate: f64,
    /// Step sizes at iteration `t` are divided by `1 + decay t`.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub iterations: usize,
    /// Stop once the total loss falls below this value.
    pub tolerance: f64,
    /// Target rows fitted at the first iteration; the window then grows
    /// linearly to the full target. Zero trains on the full target throughout.
    pub curriculum_start: usize,
    /// Fraction of the iterations over which the window reaches the full target.
    pub curriculum_fraction: f64,
    /// A step that raises the window loss by more than this factor is
    /// undone and the step sizes are halved.
    pub reject_factor: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            dt: 1.0,
            substeps: 1,
            lambda: 1.0,
            horizon_factor: 2.0,
            rho: 2.0,
            learning_rate: 0.02,
            scale_learning_rate: 0.5,
            decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            iterations: 1000,
            tolerance: 1e-12,
            curriculum_start: 6,
            curriculum_fraction: 0.7,
            reject_factor: 1.5,
        }
    }
}

/// Gradient of the loss with respect to the multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub l_nn: Vec<f64>,
    pub q_nn: Vec<f64>,
    pub loss: LossParts,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        self.l_nn
            .iter()
            .chain(&self.q_nn)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Number of recorded rows in the penalised trajectory for a window of `n_rows`.
fn horizon_rows(n_rows: usize, factor: f64) -> usize {
    let steps = (n_rows.saturating_sub(1)) as f64 * factor.max(1.0);
    steps.round() as usize + 1
}

/// Integrate every RK4 step over the penalised horizon, returning all
/// internal states (`[n_steps + 1] x k`) or `None` on a non-finite value.
fn rollout(
    a0: &[f64],
    c: &[f64],
    l: &[f64],
    q: &[f64],
    k: usize,
    h: f64,
    n_steps: usize,
) -> Option<Vec<f64>> {
    let mut states = Vec::with_capacity((n_steps + 1) * k);
    states.extend_from_slice(a0);
    let mut a = a0.to_vec();
    let mut stage = vec![0.0; k];
    let mut ks = [vec![0.0; k], vec![0.0; k], vec![0.0; k], vec![0.0; k]];
    for _ in 0..n_steps {
        crate::galerkin::rk4_step(&mut a, h, c, l, q, k, &mut stage, &mut ks);
        if a.iter().any(|x| !x.is_finite()) {
            return None;
        }
        states.extend_from_slice(&a);
    }
    Some(states)
}

fn rows_to_traj(
    states: &[f64],
    k: usize,
    substeps: usize,
    rows: std::ops::Range<usize>,
    dt: f64,
) -> CoeffTrajectory {
    let mut values = Vec::with_capacity(rows.len() * k);
    let mut times = Vec::with_capacity(rows.len());
    for r in rows {
        let s = r * substeps;
        values.extend_from_slice(&states[s * k..(s + 1) * k]);
        times.push(r as f64 * dt);
    }
    CoeffTrajectory {
        times,
        k,
        values,
        origin: Origin::Ngp,
        blowup: None,
    }
}

/// Loss at the given parameters.
pub fn evaluate(model: &NgpModel, target: &CoeffTrajectory, settings: &TrainSettings) -> LossParts {
    match forward_states(model, target, settings) {
        Some((states, ..)) => loss_from_states(&states, target, settings, &model.params),
        None => LossParts {
            mse: f64::INFINITY,
            penalty: f64::INFINITY,
            total: f64::INFINITY,
        },
    }
}

fn forward_states(
    model: &NgpModel,
    target: &CoeffTrajectory,
    s: &TrainSettings,
) -> Option<(Vec<f64>, RomOperators)> {
    let ops = model.effective_operators();
    let n_rows = horizon_rows(target.len(), model.params.horizon_factor);
    let h = s.dt / s.substeps as f64;
    let states = rollout(
        target.row(0),
        &ops.c,
        &ops.l,
        &ops.q,
        ops.k,
        h,
        (n_rows - 1) * s.substeps,
    )?;
    Some((states, ops))
}

fn loss_from_states(
    states: &[f64],
    target: &CoeffTrajectory,
    s: &TrainSettings,
    p: &NgpParameters,
) -> LossParts {
    let k = target.k;
    let n_rows = horizon_rows(target.len(), p.horizon_factor);
    let window = rows_to_traj(states, k, s.substeps, 0..target.len(), s.dt);
    let tail = rows_to_traj(states, k, s.substeps, target.len()..n_rows, s.dt);
    loss(&window, target, p.lambda, &tail, p.rho)
}

/// Loss gradient by the discrete adjoint of RK4. Starts from `target.row(0)`.
pub fn gradient(
    model: &NgpModel,
    target: &CoeffTrajectory,
    settings: &TrainSettings,
) -> Result<Gradient> {
    let k = model.k();
    if target.k != k {
        return Err(Error::structural(format!(
            "target rank {} does not match model rank {k}",
            target.k
        )));
    }
    if target.len() < 2 {
        return Err(Error::domain("target needs at least two rows"));
    }
    let (states, ops) = forward_states(model, target, settings)
        .ok_or_else(|| Error::numerical("non-finite trajectory: gradient unavailable"))?;
    let lossv = loss_from_states(&states, target, settings, &model.params);
    if !lossv.total.is_finite() {
        return Err(Error::numerical("non-finite loss: gradient unavailable"));
    }
    let p = &model.params;
    let sub = settings.substeps;
    let n_rows = horizon_rows(target.len(), p.horizon_factor);
    let n_steps = (n_rows - 1) * sub;
    let h = settings.dt / sub as f64;
    let n_win = target.len();
    let n_tail = n_rows - n_win;
    let bound = p.rho * target_norm_max(target);

    // direct sensitivity of the loss to each recorded row
    let direct = |row: usize, a: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|x| *x = 0.0);
        if row < n_win {
            let w = 2.0 / (n_win * k) as f64;
            for m in 0..k {
                out[m] = w * (a[m] - target.row(row)[m]);
            }
        } else if n_tail > 0 {
            let nrm = norm2(a);
            let ex = nrm - bound;
            if ex > 0.0 && nrm > 0.0 {
                let w = p.lambda * 2.0 * ex / (n_tail as f64 * nrm);
                for m in 0..k {
                    out[m] = w * a[m];
                }
            }
        }
    };

    let (c, l, q) = (&ops.c, &ops.l, &ops.q);
    let mut gl = vec![0.0; k * k];
    let mut gq = vec![0.0; k * k * k];
    let mut w = vec![0.0; k];
    let mut d = vec![0.0; k];
    direct(n_rows - 1, &states[n_steps * k..], &mut w);

    let mut y = [vec![0.0; k], vec![0.0; k], vec![0.0; k], vec![0.0; k]];
    let mut kk = [vec![0.0; k], vec![0.0; k], vec![0.0; k]];
    let mut gk = [vec![0.0; k], vec![0.0; k], vec![0.0; k], vec![0.0; k]];
    let mut gy = vec![0.0; k];
    let mut ga = vec![0.0; k];

    for n in (0..n_steps).rev() {
        let a = &states[n * k..(n + 1) * k];
        // recompute the stage inputs
        y[0].copy_from_slice(a);
        crate::galerkin::rhs_parts(&y[0], c, l, q, k, &mut kk[0]);
        for m in 0..k {
            y[1][m] = a[m] + 0.5 * h * kk[0][m];
        }
        crate::galerkin::rhs_parts(&y[1], c, l, q, k, &mut kk[1]);
        for m in 0..k {
            y[2][m] = a[m] + 0.5 * h * kk[1][m];
        }
        crate::galerkin::rhs_parts(&y[2], c, l, q, k, &mut kk[2]);
        for m in 0..k {
            y[3][m] = a[m] + h * kk[2][m];
        }

        ga.copy_from_slice(&w);
        for m in 0..k {
            gk[0][m] = h / 6.0 * w[m];
            gk[1][m] = h / 3.0 * w[m];
            gk[2][m] = h / 3.0 * w[m];
            gk[3][m] = h / 6.0 * w[m];
        }
        // stage 4 back to stage 1
        for s in (0..4).rev() {
            vjp(&y[s], &gk[s], l, q, &model.base, &mut gy, &mut gl, &mut gq);
            for m in 0..k {
                ga[m] += gy[m];
            }
            if s > 0 {
                let coef = if s == 3 { h } else { 0.5 * h };
                for m in 0..k {
                    gk[s - 1][m] += coef * gy[m];
                }
            }
        }
        w.copy_from_slice(&ga);
        if n % sub == 0 {
            direct(n / sub, a, &mut d);
            for m in 0..k {
                w[m] += d[m];
            }
        }
    }
    Ok(Gradient {
        l_nn: gl,
        q_nn: gq,
        loss: lossv,
    })
}

/// Vector-Jacobian product of `f(y) = C + L^T y + Q(y, y)` with cotangent `g`:
/// writes `J^T g` into `gy` and accumulates the multiplier gradients.
#[allow(clippy::too_many_arguments)]
fn vjp(
    y: &[f64],
    g: &[f64],
    l: &[f64],
    q: &[f64],
    base: &RomOperators,
    gy: &mut [f64],
    gl: &mut [f64],
    gq: &mut [f64],
) {
    let k = base.k;
    gy.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..k {
        let lrow = &l[i * k..(i + 1) * k];
        let lb = &base.l[i * k..(i + 1) * k];
        let glrow = &mut gl[i * k..(i + 1) * k];
        let mut acc = 0.0;
        for m in 0..k {
            acc += g[m] * lrow[m];
            glrow[m] += g[m] * y[i] * lb[m];
        }
        gy[i] += acc;
        for j in 0..k {
            let off = (i * k + j) * k;
            let qrow = &q[off..off + k];
            let qb = &base.q[off..off + k];
            let gqrow = &mut gq[off..off + k];
            let yij = y[i] * y[j];
            let mut s = 0.0;
            for m in 0..k {
                s += g[m] * qrow[m];
                gqrow[m] += g[m] * yij * qb[m];
            }
            // d/dy of y_i y_j s: contributes to both indices
            gy[i] += y[j] * s;
            gy[j] += y[i] * s;
        }
    }
}

/// Rows of the target used at a given iteration under the curriculum: the
/// window grows linearly from `curriculum_start` rows to the full target over
/// the first `curriculum_fraction` of the iterations.
fn window_at(iter: usize, s: &TrainSettings, full: usize) -> usize {
    if s.curriculum_start == 0 || s.curriculum_start >= full {
        return full;
    }
    let ramp = (s.curriculum_fraction * s.iterations as f64).max(1.0);
    let x = (iter as f64 / ramp).min(1.0);
    let w = s.curriculum_start as f64 + x * (full - s.curriculum_start) as f64;
    (w.round() as usize).clamp(s.curriculum_start, full)
}

/// Per-entry and shared factors generating the multipliers.
#[derive(Clone)]
struct Factors {
    entries: Vec<f64>,
    shared: [f64; 2],
}

impl Factors {
    fn write(&self, k: usize, p: &mut NgpParameters) {
        let nl = k * k;
        for (i, e) in self.entries.iter().enumerate() {
            if i < nl {
                p.l_nn[i] = self.shared[0] * e;
            } else {
                p.q_nn[i - nl] = self.shared[1] * e;
            }
        }
    }
}

/// Adam on the multiplier factors from the all-ones start, with a growing
/// training window. The returned parameters are the best full-target iterate.
pub fn train(
    ops: &RomOperators,
    target: &CoeffTrajectory,
    settings: &TrainSettings,
) -> Result<NgpModel> {
    ops.validate()?;
    if target.k != ops.k {
        return Err(Error::structural(format!(
            "target rank {} does not match operator rank {}",
            target.k, ops.k
        )));
    }
    if !(settings.dt > 0.0) || settings.substeps == 0 {
        return Err(Error::config("training needs dt > 0 and substeps >= 1"));
    }
    if target.len() < 2 {
        return Err(Error::domain("target needs at least two rows"));
    }
    let k = ops.k;
    let nl = k * k;
    let n = nl + k * k * k;
    let mut model = NgpModel::identity(ops.clone(), settings);
    let full = target.len();
    let init = evaluate(&model, target, settings);
    let mut best = model.params.clone();
    let mut best_loss = init;
    let mut record = TrainingRecord {
        losses: vec![init.total],
        initial_loss: init.total,
        best_loss: init.total,
        initial_mse: init.mse,
        best_mse: init.mse,
        ..Default::default()
    };
    if !init.total.is_finite() {
        return Err(Error::Training {
            iterations: 0,
            final_loss: init.total,
            grad_norm: f64::NAN,
        });
    }
    if init.total <= settings.tolerance {
        model.record = record;
        return Ok(model);
    }

    let mut f = Factors {
        entries: vec![1.0; n],
        shared: [1.0; 2],
    };
    let mut m1 = vec![0.0; n + 2];
    let mut m2 = vec![0.0; n + 2];
    let mut lr_scale = 1.0;
    let mut t_adam = 0;
    let mut grad_norm = f64::NAN;
    let mut grads = vec![0.0; n + 2];

    for iter in 0..settings.iterations {
        record.iterations = iter + 1;
        let window = window_at(iter, settings, full);
        let sub_target = target.head(window);
        let grad = match gradient(&model, &sub_target, settings) {
            Ok(g) => g,
            Err(_) => {
                record.rejected_steps += 1;
                model.params = best.clone();
                lr_scale *= 0.5;
                continue;
            }
        };
        grad_norm = grad.norm();
        grads.iter_mut().for_each(|g| *g = 0.0);
        for (i, g) in grad.l_nn.iter().chain(&grad.q_nn).enumerate() {
            let b = usize::from(i >= nl);
            grads[i] = g * f.shared[b];
            grads[n + b] += g * f.entries[i];
        }

        let previous = f.clone();
        t_adam += 1;
        let decay = 1.0 / (1.0 + settings.decay * iter as f64);
        let bc1 = 1.0 - settings.beta1.powi(t_adam);
        let bc2 = 1.0 - settings.beta2.powi(t_adam);
        for i in 0..n + 2 {
            let g = grads[i];
            m1[i] = settings.beta1 * m1[i] + (1.0 - settings.beta1) * g;
            m2[i] = settings.beta2 * m2[i] + (1.0 - settings.beta2) * g * g;
            let step = (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + 1e-12);
            if i < n {
                f.entries[i] -= settings.learning_rate * lr_scale * decay * step;
            } else {
                f.shared[i - n] -= settings.scale_learning_rate * lr_scale * decay * step;
            }
        }
        let before = model.params.clone();
        f.write(k, &mut model.params);

        let cand = evaluate(&model, &sub_target, settings);
        if !cand.total.is_finite() || cand.total > settings.reject_factor * grad.loss.total {
            record.rejected_steps += 1;
            f = previous;
            model.params = before;
            lr_scale *= 0.5;
            continue;
        }
        let cur = if window == full {
            cand
        } else {
            evaluate(&model, target, settings)
        };
        if !cur.total.is_finite() {
            continue;
        }
        record.losses.push(cur.total);
        if window == full && cur.total < best_loss.total {
            best_loss = cur;
            best = model.params.clone();
        }
        if window == full && cur.total <= settings.tolerance {
            break;
        }
    }
    record.best_loss = best_loss.total;
    record.best_mse = best_loss.mse;
    record.final_grad_norm = grad_norm;
    if !(best_loss.total < init.total) {
        return Err(Error::Training {
            iterations: record.iterations,
            final_loss: best_loss.total,
            grad_norm,
        });
    }
    model.params = best;
    model.record = record;
    Ok(model)
}
