//! Galerkin projection of the shallow-water tendency onto POD modes.
//!
//! The discrete tendency `F(q)` (drag omitted) is quadratic in the stacked
//! state, so substituting `q = mean + sum_i a_i phi_i` and projecting onto
//! each mode gives the coefficient ODE
//!
//! ```text
//! da_m/dt = C[m] + sum_i a_i L[i, m] + sum_ij a_i a_j Q[i, j, m]
//! ```
//!
//! with `C = <F(mean), phi>`, `L[i] = <J(mean) phi_i, phi>` and
//! `Q[i, j] = <N(phi_i, phi_j), phi>`. Contributions of the three field
//! blocks are summed in the inner product.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::binio::*;
use crate::error::{Error, Result};
use crate::pod::ModalBasis;
use crate::swe_sim::stencil::{ddx, ddy, Parity};
use crate::swe_sim::Grid;

pub const OPS_MAGIC: &[u8; 6] = b"RPOPS1";

/// Default prescale factors for `L` and `Q`.
pub const DEFAULT_ALPHA_L: f64 = 0.05;
pub const DEFAULT_ALPHA_Q: f64 = 0.02;

/// Trajectories whose max-norm exceeds this multiple of `max |A_pod|` are flagged.
pub const BLOWUP_FACTOR: f64 = 1e3;

/// Operators of the quadratic coefficient ODE.
#[derive(Debug, Clone, PartialEq)]
pub struct RomOperators {
    pub k: usize,
    pub c: Vec<f64>,
    /// Row-major `[k x k]`, `l[i * k + m]`.
    pub l: Vec<f64>,
    /// `q[(i * k + j) * k + m]`.
    pub q: Vec<f64>,
    pub alpha_l: f64,
    pub alpha_q: f64,
    /// SHA-256 of the basis file the operators were assembled from.
    pub basis_digest: [u8; 32],
    /// Inner products evaluated during assembly (zero when loaded from disk).
    pub inner_products: u64,
}

impl RomOperators {
    /// Zero operators of rank `k`.
    pub fn zeros(k: usize) -> RomOperators {
        RomOperators {
            k,
            c: vec![0.0; k],
            l: vec![0.0; k * k],
            q: vec![0.0; k * k * k],
            alpha_l: 1.0,
            alpha_q: 1.0,
            basis_digest: [0; 32],
            inner_products: 0,
        }
    }

    #[inline]
    pub fn l_at(&self, i: usize, m: usize) -> f64 {
        self.l[i * self.k + m]
    }

    #[inline]
    pub fn q_at(&self, i: usize, j: usize, m: usize) -> f64 {
        self.q[(i * self.k + j) * self.k + m]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k;
        if self.c.len() != k || self.l.len() != k * k || self.q.len() != k * k * k {
            return Err(Error::structural(format!(
                "operator sizes inconsistent with rank {k}"
            )));
        }
        if self
            .c
            .iter()
            .chain(&self.l)
            .chain(&self.q)
            .any(|x| !x.is_finite())
        {
            return Err(Error::numerical("operators contain non-finite entries"));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.validate()?;
        write_magic(w, OPS_MAGIC)?;
        write_u32(w, to_u32(self.k, "k")?)?;
        write_f64s(w, &self.c)?;
        write_f64s(w, &self.l)?;
        write_f64s(w, &self.q)?;
        write_f64(w, self.alpha_l)?;
        write_f64(w, self.alpha_q)?;
        w.write_all(&self.basis_digest)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<RomOperators> {
        expect_magic(r, OPS_MAGIC)?;
        let k = read_u32(r)? as usize;
        let c = read_f64s(r, k)?;
        let l = read_f64s(r, k * k)?;
        let q = read_f64s(r, k * k * k)?;
        let alpha_l = read_f64(r)?;
        let alpha_q = read_f64(r)?;
        let mut basis_digest = [0u8; 32];
        r.read_exact(&mut basis_digest)?;
        let ops = RomOperators {
            k,
            c,
            l,
            q,
            alpha_l,
            alpha_q,
            basis_digest,
            inner_products: 0,
        };
        ops.validate()?;
        Ok(ops)
    }
}

/// Which model produced a coefficient trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Pod,
    Gprom,
    Ngp,
    Sample,
}

/// Coefficient values over time, row-major `[n_t x k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffTrajectory {
    pub times: Vec<f64>,
    pub k: usize,
    pub values: Vec<f64>,
    pub origin: Origin,
    /// First recorded step whose state exceeded the blowup bound or was
    /// non-finite; the trajectory stops there.
    pub blowup: Option<usize>,
}

impl CoeffTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.k..(t + 1) * self.k]
    }

    /// The retained POD coefficients of a basis, stamped with `times`.
    pub fn from_basis(basis: &ModalBasis, times: &[f64]) -> Result<CoeffTrajectory> {
        if times.len() != basis.n_t() {
            return Err(Error::structural(format!(
                "{} times for {} coefficient rows",
                times.len(),
                basis.n_t()
            )));
        }
        let k = basis.rank;
        let mut values = Vec::with_capacity(times.len() * k);
        for t in 0..times.len() {
            for i in 0..k {
                values.push(basis.coeffs[(t, i)]);
            }
        }
        Ok(CoeffTrajectory {
            times: times.to_vec(),
            k,
            values,
            origin: Origin::Pod,
            blowup: None,
        })
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> CoeffTrajectory {
        let n = n.min(self.len());
        CoeffTrajectory {
            times: self.times[..n].to_vec(),
            k: self.k,
            values: self.values[..n * self.k].to_vec(),
            origin: self.origin,
            blowup: self.blowup.filter(|&b| b < n),
        }
    }

    /// Mean squared difference over the rows both trajectories share.
    pub fn mse(&self, other: &CoeffTrajectory) -> f64 {
        let n = self.len().min(other.len()) * self.k.min(other.k);
        if n == 0 || self.k != other.k {
            return f64::NAN;
        }
        let m = self.len().min(other.len()) * self.k;
        self.values[..m]
            .iter()
            .zip(&other.values[..m])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / m as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
    }
}

/// `rhs[m] = C[m] + sum_i a[i] L[i, m] + sum_ij a[i] a[j] Q[i, j, m]`.
pub fn rhs(a: &[f64], ops: &RomOperators) -> Vec<f64> {
    let mut out = vec![0.0; ops.k];
    rhs_into(a, ops, &mut out);
    out
}

/// [`rhs`] into a caller buffer.
pub fn rhs_into(a: &[f64], ops: &RomOperators, out: &mut [f64]) {
    rhs_parts(a, &ops.c, &ops.l, &ops.q, ops.k, out);
}

pub(crate) fn rhs_parts(a: &[f64], c: &[f64], l: &[f64], q: &[f64], k: usize, out: &mut [f64]) {
    out[..k].copy_from_slice(&c[..k]);
    for i in 0..k {
        let ai = a[i];
        let lrow = &l[i * k..(i + 1) * k];
        for m in 0..k {
            out[m] += ai * lrow[m];
        }
        for j in 0..k {
            let aij = ai * a[j];
            let qrow = &q[(i * k + j) * k..(i * k + j + 1) * k];
            for m in 0..k {
                out[m] += aij * qrow[m];
            }
        }
    }
}

/// Scale `L` by `alpha_l` and `Q` by `alpha_q`; the factors accumulate in the metadata.
pub fn prescale(ops: &RomOperators, alpha_l: f64, alpha_q: f64) -> Result<RomOperators> {
    if !(alpha_l.is_finite() && alpha_q.is_finite()) {
        return Err(Error::domain("prescale factors must be finite"));
    }
    let mut out = ops.clone();
    out.l.iter_mut().for_each(|x| *x *= alpha_l);
    out.q.iter_mut().for_each(|x| *x *= alpha_q);
    out.alpha_l *= alpha_l;
    out.alpha_q *= alpha_q;
    Ok(out)
}

/// `BLOWUP_FACTOR * max |A_pod|` over the retained coefficients.
pub fn blowup_bound(basis: &ModalBasis) -> f64 {
    BLOWUP_FACTOR * basis.coeff_max_abs()
}

/// Time-stepping settings for [`integrate_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationSettings {
    /// Interval between recorded rows.
    pub dt: f64,
    /// Recorded intervals after the initial row.
    pub n_steps: usize,
    /// RK4 steps per recorded interval.
    pub substeps: usize,
    /// Max-norm threshold for the blowup flag.
    pub bound: f64,
}

/// Classical RK4 with `dt` per step and every step recorded; no blowup bound
/// beyond non-finite values.
pub fn integrate(
    ops: &RomOperators,
    a0: &[f64],
    dt: f64,
    n_steps: usize,
) -> Result<CoeffTrajectory> {
    integrate_with(
        ops,
        a0,
        &IntegrationSettings {
            dt,
            n_steps,
            substeps: 1,
            bound: f64::INFINITY,
        },
    )
}

/// RK4 integration of the coefficient ODE. Divergence truncates the
/// trajectory and sets [`CoeffTrajectory::blowup`].
pub fn integrate_with(
    ops: &RomOperators,
    a0: &[f64],
    s: &IntegrationSettings,
) -> Result<CoeffTrajectory> {
    integrate_parts(a0, &ops.c, &ops.l, &ops.q, ops.k, s, Origin::Gprom)
}

pub(crate) fn integrate_parts(
    a0: &[f64],
    c: &[f64],
    l: &[f64],
    q: &[f64],
    k: usize,
    s: &IntegrationSettings,
    origin: Origin,
) -> Result<CoeffTrajectory> {
    if !(s.dt > 0.0 && s.dt.is_finite()) {
        return Err(Error::domain(format!(
            "time step must be positive, got {}",
            s.dt
        )));
    }
    if s.substeps == 0 {
        return Err(Error::domain("substeps must be at least 1"));
    }
    if a0.len() != k {
        return Err(Error::structural(format!(
            "initial vector has length {}, rank is {k}",
            a0.len()
        )));
    }
    if a0.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("initial coefficients must be finite"));
    }
    let h = s.dt / s.substeps as f64;
    let mut times = Vec::with_capacity(s.n_steps + 1);
    let mut values = Vec::with_capacity((s.n_steps + 1) * k);
    times.push(0.0);
    values.extend_from_slice(a0);
    let mut a = a0.to_vec();
    let mut stage = vec![0.0; k];
    let mut ks = [vec![0.0; k], vec![0.0; k], vec![0.0; k], vec![0.0; k]];
    let mut blowup = None;
    'outer: for step in 1..=s.n_steps {
        for _ in 0..s.substeps {
            rk4_step(&mut a, h, c, l, q, k, &mut stage, &mut ks);
            if a.iter().any(|x| !x.is_finite() || x.abs() > s.bound) {
                blowup = Some(step);
                break 'outer;
            }
        }
        times.push(step as f64 * s.dt);
        values.extend_from_slice(&a);
    }
    Ok(CoeffTrajectory {
        times,
        k,
        values,
        origin,
        blowup,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn rk4_step(
    a: &mut [f64],
    h: f64,
    c: &[f64],
    l: &[f64],
    q: &[f64],
    k: usize,
    stage: &mut [f64],
    ks: &mut [Vec<f64>; 4],
) {
    rhs_parts(a, c, l, q, k, &mut ks[0]);
    for (s, w) in [(1usize, 0.5 * h), (2, 0.5 * h), (3, h)] {
        for m in 0..k {
            stage[m] = a[m] + w * ks[s - 1][m];
        }
        let (_, rest) = ks.split_at_mut(s);
        rhs_parts(stage, c, l, q, k, &mut rest[0]);
    }
    for m in 0..k {
        a[m] += h / 6.0 * (ks[0][m] + 2.0 * ks[1][m] + 2.0 * ks[2][m] + ks[3][m]);
    }
}

/// Evaluation of the discrete tendency split into its affine and bilinear parts.
///
/// Fields are stacked `h | u | v` in physical units. Velocities on land are
/// treated as zero and every output is zero on land, as in the solver.
struct Tendency<'g> {
    grid: &'g Grid,
}

impl Tendency<'_> {
    fn n(&self) -> usize {
        self.grid.len()
    }

    /// `N(p, q)`: advection of `q` by `p` and the flux `p_h q_vel`.
    fn bilinear(&self, p: &[f64], q: &[f64], out: &mut [f64]) {
        let g = self.grid;
        let n = self.n();
        let wet = |c: usize| g.is_wet(c);
        let (ph, pu, pv) = (&p[..n], &p[n..2 * n], &p[2 * n..]);
        let (qu, qv) = (&q[n..2 * n], &q[2 * n..]);
        let mask = |x: f64, c: usize| if wet(c) { x } else { 0.0 };
        let mut f = vec![0.0; n];
        let mut d1 = vec![0.0; n];
        let mut d2 = vec![0.0; n];

        for c in 0..n {
            f[c] = ph[c] * mask(qu[c], c);
        }
        ddx(g, &f, Parity::Odd, &mut d1);
        for c in 0..n {
            f[c] = ph[c] * mask(qv[c], c);
        }
        ddy(g, &f, Parity::Odd, &mut d2);
        for c in 0..n {
            out[c] = -(d1[c] + d2[c]);
        }

        let qum: Vec<f64> = (0..n).map(|c| mask(qu[c], c)).collect();
        let qvm: Vec<f64> = (0..n).map(|c| mask(qv[c], c)).collect();
        ddx(g, &qum, Parity::Odd, &mut d1);
        ddy(g, &qum, Parity::Even, &mut d2);
        for c in 0..n {
            out[n + c] = -(mask(pu[c], c) * d1[c] + mask(pv[c], c) * d2[c]);
        }
        ddx(g, &qvm, Parity::Even, &mut d1);
        ddy(g, &qvm, Parity::Odd, &mut d2);
        for c in 0..n {
            out[2 * n + c] = -(mask(pu[c], c) * d1[c] + mask(pv[c], c) * d2[c]);
        }
        for c in 0..n {
            if !wet(c) {
                out[c] = 0.0;
                out[n + c] = 0.0;
                out[2 * n + c] = 0.0;
            }
        }
    }

    /// Coriolis, pressure gradient and sponge terms. With `with_bed` the
    /// surface is `p_h + z_b` (the full state); otherwise `p_h` (a perturbation).
    fn affine(&self, p: &[f64], with_bed: bool, out: &mut [f64]) {
        let g = self.grid;
        let n = self.n();
        let (ph, pu, pv) = (&p[..n], &p[n..2 * n], &p[2 * n..]);
        let eta: Vec<f64> = (0..n)
            .map(|c| {
                if !g.is_wet(c) {
                    0.0
                } else if with_bed {
                    ph[c] + g.bathymetry[c]
                } else {
                    ph[c]
                }
            })
            .collect();
        let mut ex = vec![0.0; n];
        let mut ey = vec![0.0; n];
        ddx(g, &eta, Parity::Even, &mut ex);
        ddy(g, &eta, Parity::Even, &mut ey);
        for c in 0..n {
            if !g.is_wet(c) {
                out[c] = 0.0;
                out[n + c] = 0.0;
                out[2 * n + c] = 0.0;
                continue;
            }
            let f = g.coriolis[c];
            let sp = g.sponge[c];
            out[c] = -sp * eta[c];
            out[n + c] = f * pv[c] - g.gravity * ex[c] - sp * pu[c];
            out[2 * n + c] = -f * pu[c] - g.gravity * ey[c] - sp * pv[c];
        }
    }

    /// Full tendency `F(q)` without drag.
    fn full(&self, q: &[f64]) -> Vec<f64> {
        let n3 = 3 * self.n();
        let mut out = vec![0.0; n3];
        let mut nq = vec![0.0; n3];
        self.affine(q, true, &mut out);
        self.bilinear(q, q, &mut nq);
        out.iter_mut().zip(&nq).for_each(|(o, x)| *o += x);
        out
    }

    /// Jacobian action `J(qbar) p = A(p) + N(qbar, p) + N(p, qbar)`.
    fn jacobian(&self, qbar: &[f64], p: &[f64]) -> Vec<f64> {
        let n3 = 3 * self.n();
        let mut out = vec![0.0; n3];
        let mut t = vec![0.0; n3];
        self.affine(p, false, &mut out);
        self.bilinear(qbar, p, &mut t);
        out.iter_mut().zip(&t).for_each(|(o, x)| *o += x);
        self.bilinear(p, qbar, &mut t);
        out.iter_mut().zip(&t).for_each(|(o, x)| *o += x);
        out
    }
}

fn block_scale(v: &[f64], n: usize, scales: [f64; 3], inverse: bool) -> Vec<f64> {
    v.iter()
        .enumerate()
        .map(|(r, x)| {
            let s = scales[r / n];
            if inverse {
                x / s
            } else {
                x * s
            }
        })
        .collect()
}

/// Galerkin operators from a truncated basis on the grid of its snapshots.
///
/// The basis mean supplies the mean flow. With non-unit field scales the
/// tendency is evaluated in physical units and mapped back to the scaled
/// coordinates of the modes. Drag is not represented.
pub fn assemble_operators(basis: &ModalBasis, grid: &Grid) -> Result<RomOperators> {
    let k = basis.rank;
    if k == 0 {
        return Err(Error::domain("basis rank must be at least 1"));
    }
    let n = grid.len();
    if basis.n_state() != 3 * n {
        return Err(Error::structural(format!(
            "basis has {} state rows, grid {}x{} needs {}",
            basis.n_state(),
            grid.nx,
            grid.ny,
            3 * n
        )));
    }
    grid.validate()?;
    let scales = basis.scales;
    let ten = Tendency { grid };
    let modes_scaled: Vec<Vec<f64>> = (0..k)
        .map(|i| basis.modes.column(i).iter().copied().collect())
        .collect();
    let modes: Vec<Vec<f64>> = modes_scaled
        .iter()
        .map(|m| block_scale(m, n, scales, true))
        .collect();
    let mean = block_scale(basis.mean.as_slice(), n, scales, true);
    let project = |field: Vec<f64>| -> Vec<f64> {
        let f = block_scale(&field, n, scales, false);
        modes_scaled.iter().map(|phi| dot(&f, phi)).collect()
    };

    let c = project(ten.full(&mean));
    let l_rows: Vec<Vec<f64>> = modes
        .par_iter()
        .map(|p| project(ten.jacobian(&mean, p)))
        .collect();
    let q_blocks: Vec<Vec<f64>> = (0..k * k)
        .into_par_iter()
        .map(|ij| {
            let (i, j) = (ij / k, ij % k);
            let mut out = vec![0.0; 3 * n];
            ten.bilinear(&modes[i], &modes[j], &mut out);
            project(out)
        })
        .collect();

    let ops = RomOperators {
        k,
        c,
        l: l_rows.concat(),
        q: q_blocks.concat(),
        alpha_l: 1.0,
        alpha_q: 1.0,
        basis_digest: sha256(&basis.to_bytes()?),
        inner_products: (k + k * k + k * k * k) as u64,
    };
    ops.validate()?;
    Ok(ops)
}

/// Projection `<F(mean + Phi a), phi_m>` evaluated directly in state space.
///
/// Equals [`rhs`] of the assembled operators up to round-off; used to check
/// assembly against the full tendency.
pub fn projected_tendency(basis: &ModalBasis, grid: &Grid, a: &[f64]) -> Result<Vec<f64>> {
    let k = basis.rank;
    let n = grid.len();
    if a.len() != k || basis.n_state() != 3 * n {
        return Err(Error::structural("coefficient or grid size mismatch"));
    }
    let mut x: Vec<f64> = basis.mean.iter().copied().collect();
    for (i, &ai) in a.iter().enumerate() {
        for (r, xr) in x.iter_mut().enumerate() {
            *xr += ai * basis.modes[(r, i)];
        }
    }
    let q = block_scale(&x, n, basis.scales, true);
    let f = block_scale(&Tendency { grid }.full(&q), n, basis.scales, false);
    Ok((0..k)
        .map(|m| dot(&f, basis.modes.column(m).as_slice()))
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Basis rows restricted to a subset of the stacked state, for sensor reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedBasis {
    pub rows: Vec<usize>,
    pub k: usize,
    /// Row-major `[rows x k]`.
    pub modes: Vec<f64>,
    pub mean: Vec<f64>,
    /// Divisor turning scaled values back into physical units.
    pub unscale: Vec<f64>,
}

impl RestrictedBasis {
    pub fn new(basis: &ModalBasis, rows: &[usize]) -> Result<RestrictedBasis> {
        let n_state = basis.n_state();
        let n = n_state / 3;
        let k = basis.rank;
        let mut modes = Vec::with_capacity(rows.len() * k);
        let mut mean = Vec::with_capacity(rows.len());
        let mut unscale = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= n_state {
                return Err(Error::domain(format!(
                    "state row {r} out of range (n_state = {n_state})"
                )));
            }
            for i in 0..k {
                modes.push(basis.modes[(r, i)]);
            }
            mean.push(basis.mean[r]);
            unscale.push(basis.scales[(r / n.max(1)).min(2)]);
        }
        Ok(RestrictedBasis {
            rows: rows.to_vec(),
            k,
            modes,
            mean,
            unscale,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Physical value of restricted row `s` for coefficients `a`.
    #[inline]
    pub fn value(&self, s: usize, a: &[f64]) -> f64 {
        let phi = &self.modes[s * self.k..(s + 1) * self.k];
        let mut x = self.mean[s];
        for i in 0..self.k {
            x += phi[i] * a[i];
        }
        x / self.unscale[s]
    }

    /// Row-major `[n_t x rows]` reconstruction.
    pub fn reconstruct(&self, traj: &CoeffTrajectory) -> Result<Vec<f64>> {
        if traj.k != self.k {
            return Err(Error::structural(format!(
                "trajectory rank {} does not match basis rank {}",
                traj.k, self.k
            )));
        }
        let mut out = Vec::with_capacity(traj.len() * self.n_rows());
        for t in 0..traj.len() {
            let a = traj.row(t);
            for s in 0..self.n_rows() {
                out.push(self.value(s, a));
            }
        }
        Ok(out)
    }
}

/// Mean-added reconstruction `mean + Phi_k a(t)` in physical units, at all
/// state rows or at the given rows. Output is row-major `[n_t x rows]`.
pub fn reconstruct(
    basis: &ModalBasis,
    traj: &CoeffTrajectory,
    rows: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..basis.n_state()).collect();
            &all
        }
    };
    RestrictedBasis::new(basis, rows)?.reconstruct(traj)
}

/// State rows of the water-thickness block for the given grid cells.
pub fn height_rows(cells: &[usize]) -> Vec<usize> {
    cells.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_ops(k: usize, seed: u64) -> RomOperators {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ops = RomOperators::zeros(k);
        for x in ops.c.iter_mut().chain(&mut ops.l).chain(&mut ops.q) {
            *x = rng.random_range(-1.0..1.0);
        }
        ops
    }

    #[test]
    fn zero_coefficients_give_c() {
        let ops = random_ops(4, 1);
        assert_eq!(rhs(&[0.0; 4], &ops), ops.c);
    }

    #[test]
    fn identity_linear_part() {
        let mut ops = RomOperators::zeros(3);
        for i in 0..3 {
            ops.l[i * 3 + i] = 1.0;
        }
        let a = [0.3, -1.2, 2.5];
        assert_eq!(rhs(&a, &ops), a.to_vec());
    }

    #[test]
    fn scalar_decay_matches_exponential() {
        let mut ops = RomOperators::zeros(1);
        ops.l[0] = -1.0;
        let tr = integrate(&ops, &[1.0], 0.1, 10).unwrap();
        assert_eq!(tr.len(), 11);
        assert!((tr.row(10)[0] - (-1.0f64).exp()).abs() < 1e-6);
        assert!(tr.blowup.is_none());
    }

    #[test]
    fn zero_operators_hold_the_initial_value() {
        let ops = RomOperators::zeros(3);
        let tr = integrate(&ops, &[1.0, -2.0, 0.5], 1.0, 5).unwrap();
        for t in 0..tr.len() {
            assert_eq!(tr.row(t), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn blowup_is_flagged_not_fatal() {
        let mut ops = RomOperators::zeros(1);
        ops.q[0] = 1.0;
        let s = IntegrationSettings {
            dt: 0.5,
            n_steps: 20,
            substeps: 1,
            bound: 100.0,
        };
        let tr = integrate_with(&ops, &[1.0], &s).unwrap();
        let b = tr.blowup.expect("quadratic growth should be flagged");
        assert!(b < 20);
        assert_eq!(tr.len(), b);
        assert!(tr.values.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn prescale_identity_and_metadata() {
        let ops = random_ops(3, 2);
        assert_eq!(prescale(&ops, 1.0, 1.0).unwrap(), ops);
        let p = prescale(&ops, DEFAULT_ALPHA_L, DEFAULT_ALPHA_Q).unwrap();
        assert_eq!((p.alpha_l, p.alpha_q), (0.05, 0.02));
    }

    #[test]
    fn operator_file_round_trip() {
        let ops = random_ops(3, 3);
        let bytes = ops.to_bytes().unwrap();
        assert_eq!(&bytes[..6], b"RPOPS1");
        assert_eq!(bytes.len(), 6 + 4 + 8 * (3 + 9 + 27 + 2) + 32);
        assert_eq!(RomOperators::read_from(&mut bytes.as_slice()).unwrap(), ops);
    }
}
