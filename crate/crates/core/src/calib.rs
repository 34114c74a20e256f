//! Hierarchical Bayesian calibration of nGP initial values.
//!
//! Model: `y_i(t) = H_i(t) Phi B_i(t) + eps_i(t)`, `B_i = g(b0_i, t)`,
//! `b0_i ~ N(mu0, Sigma)`, `eps ~ N(0, diag(sigma_eps))`, with priors
//! `mu0 ~ N(A0, Sigma0)`, `Sigma ~ IW(Psi, nu)` and inverse-gamma priors on the
//! per-sensor noise variances. Sampled by adaptive Metropolis-Hastings on each
//! `b0_i` within conjugate Gibbs updates of the rest.

use std::io::{Read, Write};

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{
    expect_magic, read_f64s, read_u32, read_u64, to_u32, write_f64s, write_magic, write_u32,
    write_u64,
};
use crate::error::{Error, Result};
use crate::galerkin::{integrate_with, IntegrationSettings, RestrictedBasis, RomOperators};
use crate::ngp::NgpModel;
use crate::pod::ModalBasis;
use crate::swe_sim::Grid;

pub const POSTERIOR_MAGIC: &[u8; 7] = b"RPPOST1";

/// Reference acceptance rate of the random-walk proposals.
pub const TARGET_ACCEPTANCE: f64 = 0.234;

/// One set of sensor records used for calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub times: Vec<f64>,
    pub n_sensors: usize,
    /// Row-major `[n_t x n_sensors]` surface elevation (m); NaN where never recorded.
    pub values: Vec<f64>,
    /// Incidence mask, `true` where observed.
    pub mask: Vec<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioRow {
    time_s: f64,
    sensor_id: usize,
    height_m: f64,
}

impl Scenario {
    pub fn new(
        id: impl Into<String>,
        times: Vec<f64>,
        n_sensors: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Scenario> {
        let s = Scenario {
            id: id.into(),
            times,
            n_sensors,
            values,
            mask,
        };
        s.validate()?;
        Ok(s)
    }

    /// Scenario with every entry observed.
    pub fn complete(
        id: impl Into<String>,
        times: Vec<f64>,
        n_sensors: usize,
        values: Vec<f64>,
    ) -> Scenario {
        let mask = values.iter().map(|v| v.is_finite()).collect();
        Scenario {
            id: id.into(),
            times,
            n_sensors,
            values,
            mask,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len() * self.n_sensors;
        if self.values.len() != n || self.mask.len() != n {
            return Err(Error::structural(format!(
                "scenario {}: expected {n} entries, found {} values and {} mask flags",
                self.id,
                self.values.len(),
                self.mask.len()
            )));
        }
        if let Some(p) = (0..n).find(|&p| self.mask[p] && !self.values[p].is_finite()) {
            return Err(Error::domain(format!(
                "scenario {}: observed entry {p} is not finite",
                self.id
            )));
        }
        Ok(())
    }

    pub fn n_t(&self) -> usize {
        self.times.len()
    }

    pub fn observed(&self, t: usize, s: usize) -> Option<f64> {
        let p = t * self.n_sensors + s;
        self.mask[p].then_some(self.values[p])
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Last time row holding an observation.
    pub fn last_observed_row(&self) -> Option<usize> {
        (0..self.n_t())
            .rev()
            .find(|&t| (0..self.n_sensors).any(|s| self.mask[t * self.n_sensors + s]))
    }

    /// Scenario restricted to the given sensor columns.
    pub fn select_sensors(&self, keep: &[usize]) -> Scenario {
        let mut values = Vec::with_capacity(self.n_t() * keep.len());
        let mut mask = Vec::with_capacity(values.capacity());
        for t in 0..self.n_t() {
            for &s in keep {
                values.push(self.values[t * self.n_sensors + s]);
                mask.push(self.mask[t * self.n_sensors + s]);
            }
        }
        Scenario {
            id: self.id.clone(),
            times: self.times.clone(),
            n_sensors: keep.len(),
            values,
            mask,
        }
    }

    /// Long-format CSV of the observed entries: time_s, sensor_id, height_m.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for t in 0..self.n_t() {
            for s in 0..self.n_sensors {
                if let Some(v) = self.observed(t, s) {
                    out.serialize(ScenarioRow {
                        time_s: self.times[t],
                        sensor_id: s,
                        height_m: v,
                    })?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads long-format records onto a known time axis; absent rows are unobserved.
    pub fn read_csv<R: Read>(
        r: R,
        id: impl Into<String>,
        times: &[f64],
        n_sensors: usize,
    ) -> Result<Scenario> {
        let id = id.into();
        let n = times.len() * n_sensors;
        let mut values = vec![f64::NAN; n];
        let mut mask = vec![false; n];
        let tol = if times.len() > 1 {
            1e-6 * (times[1] - times[0]).abs()
        } else {
            1e-9
        };
        let mut rd = csv::Reader::from_reader(r);
        for row in rd.deserialize() {
            let row: ScenarioRow = row?;
            if row.sensor_id >= n_sensors {
                return Err(Error::domain(format!(
                    "scenario {id}: sensor id {} out of range",
                    row.sensor_id
                )));
            }
            let t = times
                .iter()
                .position(|&x| (x - row.time_s).abs() <= tol)
                .ok_or_else(|| {
                    Error::domain(format!(
                        "scenario {id}: time {} not on the model time axis",
                        row.time_s
                    ))
                })?;
            let p = t * n_sensors + row.sensor_id;
            values[p] = row.height_m;
            mask[p] = row.height_m.is_finite();
        }
        Scenario::new(id, times.to_vec(), n_sensors, values, mask)
    }
}

/// Surface elevation at sensor cells as an affine function of the coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    pub restricted: RestrictedBasis,
    /// Bed elevation added to the reconstructed thickness.
    pub offset: Vec<f64>,
}

impl ObservationModel {
    pub fn new(basis: &ModalBasis, grid: &Grid, cells: &[usize]) -> Result<ObservationModel> {
        if basis.n_state() != 3 * grid.len() {
            return Err(Error::structural("basis does not match the grid"));
        }
        for &c in cells {
            if c >= grid.len() || !grid.is_wet(c) {
                return Err(Error::domain(format!(
                    "sensor cell {c} is not a wet grid cell"
                )));
            }
        }
        Ok(ObservationModel {
            restricted: RestrictedBasis::new(basis, cells)?,
            offset: cells.iter().map(|&c| grid.bathymetry[c]).collect(),
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.offset.len()
    }

    pub fn k(&self) -> usize {
        self.restricted.k
    }

    #[inline]
    pub fn eta(&self, s: usize, a: &[f64]) -> f64 {
        self.restricted.value(s, a) + self.offset[s]
    }

    /// Observation model on a subset of the sensors.
    pub fn subset(&self, keep: &[usize]) -> ObservationModel {
        let k = self.k();
        let r = &self.restricted;
        ObservationModel {
            restricted: RestrictedBasis {
                rows: keep.iter().map(|&s| r.rows[s]).collect(),
                k,
                modes: keep
                    .iter()
                    .flat_map(|&s| r.modes[s * k..(s + 1) * k].iter().copied())
                    .collect(),
                mean: keep.iter().map(|&s| r.mean[s]).collect(),
                unscale: keep.iter().map(|&s| r.unscale[s]).collect(),
            },
            offset: keep.iter().map(|&s| self.offset[s]).collect(),
        }
    }
}

/// nGP plus observation model: maps an initial value to sensor series.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub ngp: NgpModel,
    /// Operators with the multipliers applied.
    ops: RomOperators,
    pub obs: ObservationModel,
    /// Interval between time rows.
    pub dt: f64,
    pub substeps: usize,
    /// Coefficient magnitude treated as blowup.
    pub bound: f64,
}

impl Surrogate {
    /// `bound` is the coefficient magnitude treated as blowup, usually
    /// [`crate::galerkin::blowup_bound`] of the basis.
    pub fn new(
        ngp: NgpModel,
        obs: ObservationModel,
        dt: f64,
        substeps: usize,
        bound: f64,
    ) -> Result<Surrogate> {
        if ngp.k() != obs.k() {
            return Err(Error::structural(format!(
                "nGP rank {} does not match observation rank {}",
                ngp.k(),
                obs.k()
            )));
        }
        if !(dt > 0.0) || substeps == 0 || !(bound > 0.0) {
            return Err(Error::config(
                "surrogate needs dt > 0, substeps >= 1 and a positive blowup bound",
            ));
        }
        Ok(Surrogate {
            ops: ngp.effective_operators(),
            ngp,
            obs,
            dt,
            substeps,
            bound,
        })
    }

    pub fn k(&self) -> usize {
        self.ngp.k()
    }

    /// Surrogate on a subset of the sensors.
    pub fn with_sensors(&self, keep: &[usize]) -> Surrogate {
        Surrogate {
            obs: self.obs.subset(keep),
            ..self.clone()
        }
    }

    /// Row-major `[n_rows x k]` coefficients, or `None` on blowup.
    pub fn coefficients(&self, b0: &[f64], n_rows: usize) -> Option<Vec<f64>> {
        let s = IntegrationSettings {
            dt: self.dt,
            n_steps: n_rows.saturating_sub(1),
            substeps: self.substeps,
            bound: self.bound,
        };
        match integrate_with(&self.ops, b0, &s) {
            Ok(tr) if tr.blowup.is_none() => Some(tr.values),
            _ => None,
        }
    }

    /// Row-major `[n_rows x n_sensors]` elevations, or `None` on blowup.
    pub fn predict(&self, b0: &[f64], n_rows: usize) -> Option<Vec<f64>> {
        let rows = self.coefficients(b0, n_rows)?;
        let k = self.k();
        let ns = self.obs.n_sensors();
        let mut out = Vec::with_capacity(n_rows * ns);
        for t in 0..n_rows {
            let a = &rows[t * k..(t + 1) * k];
            for s in 0..ns {
                out.push(self.obs.eta(s, a));
            }
        }
        Some(out)
    }

    /// Per-sensor residual sums over the observed entries, or `None` on blowup.
    pub fn residuals(&self, b0: &[f64], scenario: &Scenario) -> Option<ResidualStats> {
        let ns = scenario.n_sensors;
        let mut stats = ResidualStats::zeros(ns);
        let Some(last) = scenario.last_observed_row() else {
            return Some(stats);
        };
        let rows = self.coefficients(b0, last + 1)?;
        let k = self.k();
        for t in 0..=last {
            let a = &rows[t * k..(t + 1) * k];
            for s in 0..ns {
                if let Some(y) = scenario.observed(t, s) {
                    let r = y - self.obs.eta(s, a);
                    stats.sse[s] += r * r;
                    stats.count[s] += 1;
                }
            }
        }
        Some(stats)
    }

    fn check_scenario(&self, sc: &Scenario) -> Result<()> {
        sc.validate()?;
        if sc.n_sensors != self.obs.n_sensors() {
            return Err(Error::structural(format!(
                "scenario {} has {} sensors, observation model has {}",
                sc.id,
                sc.n_sensors,
                self.obs.n_sensors()
            )));
        }
        if let Some(&t0) = sc.times.first() {
            for (t, &x) in sc.times.iter().enumerate() {
                if (x - t0 - t as f64 * self.dt).abs() > 1e-6 * self.dt * (t as f64 + 1.0) {
                    return Err(Error::structural(format!(
                        "scenario {}: time row {t} at {x} is off the model cadence {}",
                        sc.id, self.dt
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-sensor sum of squared residuals and observation counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStats {
    pub sse: Vec<f64>,
    pub count: Vec<usize>,
}

impl ResidualStats {
    pub fn zeros(n_sensors: usize) -> ResidualStats {
        ResidualStats {
            sse: vec![0.0; n_sensors],
            count: vec![0; n_sensors],
        }
    }

    /// Gaussian log density given per-sensor variances.
    pub fn log_likelihood(&self, sigma_eps: &[f64]) -> f64 {
        let mut ll = 0.0;
        for s in 0..self.sse.len() {
            if self.count[s] > 0 {
                let v = sigma_eps[s];
                ll -= 0.5 * self.count[s] as f64 * (2.0 * std::f64::consts::PI * v).ln()
                    + 0.5 * self.sse[s] / v;
            }
        }
        ll
    }
}

/// Log density of the observed entries of `scenario` given `b0`; minus
/// infinity when the nGP solve blows up.
pub fn log_likelihood(
    b0: &[f64],
    scenario: &Scenario,
    surrogate: &Surrogate,
    sigma_eps: &[f64],
) -> f64 {
    match surrogate.residuals(b0, scenario) {
        Some(r) => r.log_likelihood(sigma_eps),
        None => f64::NEG_INFINITY,
    }
}

/// Prior settings that are not fixed by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSettings {
    /// `Sigma0 = tau^2 D` where `D` holds the mean-square POD coefficients.
    pub tau: f64,
    /// Inverse-Wishart scale `Psi = psi0 D`.
    pub psi0: f64,
    /// Inverse-Wishart degrees of freedom in excess of `k`.
    pub nu_extra: f64,
    /// Inverse-gamma shape of each sensor noise variance.
    pub noise_shape: f64,
    /// Inverse-gamma scale of each sensor noise variance (m^2).
    pub noise_scale: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        PriorSettings {
            tau: 1.0,
            psi0: 1.0,
            nu_extra: 2.0,
            noise_shape: 2.0,
            noise_scale: 1e-4,
        }
    }
}

/// Hyperparameters of the hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyper {
    /// Prior mean of `mu0`.
    pub a0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    /// Inverse-Wishart scale matrix.
    pub psi: DMatrix<f64>,
    pub nu: f64,
    pub noise_shape: f64,
    pub noise_scale: f64,
}

impl Hyper {
    /// Defaults anchored at the reference initial coefficients `a0`, with
    /// per-mode scales from the mean-square POD coefficients of `basis`.
    pub fn from_basis(basis: &ModalBasis, a0: &[f64], prior: &PriorSettings) -> Result<Hyper> {
        let k = basis.rank;
        if a0.len() != k || k == 0 {
            return Err(Error::structural(format!(
                "prior mean has length {}, basis rank is {k}",
                a0.len()
            )));
        }
        let n_t = basis.n_t().max(1) as f64;
        let d: Vec<f64> = basis.singular_values[..k]
            .iter()
            .map(|s| (s * s / n_t).max(f64::MIN_POSITIVE))
            .collect();
        let dm = DMatrix::from_diagonal(&DVector::from_vec(d));
        let h = Hyper {
            a0: DVector::from_column_slice(a0),
            sigma0: &dm * (prior.tau * prior.tau),
            psi: &dm * prior.psi0,
            nu: k as f64 + prior.nu_extra,
            noise_shape: prior.noise_shape,
            noise_scale: prior.noise_scale,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn k(&self) -> usize {
        self.a0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if self.sigma0.shape() != (k, k) || self.psi.shape() != (k, k) {
            return Err(Error::structural(
                "hyperparameter matrices do not match the rank",
            ));
        }
        if !(self.nu > k as f64 - 1.0) {
            return Err(Error::config(format!(
                "inverse-Wishart dof {} must exceed k - 1 = {}",
                self.nu,
                k as f64 - 1.0
            )));
        }
        if !(self.noise_shape > 0.0 && self.noise_scale > 0.0) {
            return Err(Error::config(
                "noise prior shape and scale must be positive",
            ));
        }
        chol(&self.sigma0, "Sigma0")?;
        chol(&self.psi, "Psi")?;
        Ok(())
    }
}

/// Current values of all sampled quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyState {
    pub b0: Vec<Vec<f64>>,
    pub mu0: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub sigma_eps: Vec<f64>,
}

fn chol(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    Cholesky::new(sym).ok_or_else(|| {
        let eig = nalgebra::SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues;
        let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Error::numerical(format!(
            "{what} is not positive definite (eigenvalues in [{lo:e}, {hi:e}], condition {:e})",
            hi / lo.abs().max(f64::MIN_POSITIVE)
        ))
    })
}

fn standard_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Draw from `N(mean, L L^T)`.
pub fn sample_normal<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    l: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    mean + l * standard_normals(mean.len(), rng)
}

/// Inverse-Wishart distribution with scale matrix `scale` and `dof` degrees of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseWishart {
    pub scale: DMatrix<f64>,
    pub dof: f64,
}

impl InverseWishart {
    /// `scale / (dof - k - 1)`; defined for `dof > k + 1`.
    pub fn mean(&self) -> Option<DMatrix<f64>> {
        let k = self.scale.nrows() as f64;
        (self.dof > k + 1.0).then(|| &self.scale / (self.dof - k - 1.0))
    }

    /// Bartlett draw of `W ~ Wishart(scale^-1, dof)` returned as `W^-1`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DMatrix<f64>> {
        let k = self.scale.nrows();
        if !(self.dof > k as f64 - 1.0) {
            return Err(Error::domain(format!(
                "inverse-Wishart dof {} must exceed k - 1",
                self.dof
            )));
        }
        let inv = chol(&self.scale, "inverse-Wishart scale")?.inverse();
        let l = chol(&inv, "inverse of the inverse-Wishart scale")?.l();
        let mut a = DMatrix::zeros(k, k);
        for i in 0..k {
            let chi = ChiSquared::new(self.dof - i as f64)
                .map_err(|e| Error::numerical(e.to_string()))?;
            a[(i, i)] = chi.sample(rng).sqrt();
            for j in 0..i {
                a[(i, j)] = rng.sample(StandardNormal);
            }
        }
        let la = l * a;
        let w = &la * la.transpose();
        let sigma = chol(&w, "Wishart draw")?.inverse();
        Ok((&sigma + sigma.transpose()) * 0.5)
    }
}

/// Inverse-gamma distribution with density proportional to `x^-(shape+1) exp(-scale/x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGamma {
    pub shape: f64,
    pub scale: f64,
}

impl InverseGamma {
    pub fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.scale / (self.shape - 1.0))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let g = Gamma::new(self.shape, 1.0 / self.scale)
            .map_err(|e| Error::numerical(e.to_string()))?;
        Ok(1.0 / g.sample(rng))
    }
}

/// Normal full conditional of `mu0` given the initial values and `Sigma`.
pub fn mu0_conditional(
    b0: &[Vec<f64>],
    sigma: &DMatrix<f64>,
    hyper: &Hyper,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let k = hyper.k();
    let p0 = chol(&hyper.sigma0, "Sigma0")?.inverse();
    let mut precision = p0.clone();
    let mut rhs = &p0 * &hyper.a0;
    if !b0.is_empty() {
        let ps = chol(sigma, "Sigma")?.inverse();
        let mut sum = DVector::zeros(k);
        for b in b0 {
            sum += DVector::from_column_slice(b);
        }
        precision += &ps * b0.len() as f64;
        rhs += ps * sum;
    }
    let cov = chol(&precision, "mu0 conditional precision")?.inverse();
    let mean = &cov * rhs;
    Ok((mean, (&cov + cov.transpose()) * 0.5))
}

pub fn gibbs_update_mu0<R: Rng + ?Sized>(
    state: &mut HierarchyState,
    hyper: &Hyper,
    rng: &mut R,
) -> Result<()> {
    let (mean, cov) = mu0_conditional(&state.b0, &state.sigma, hyper)?;
    let l = chol(&cov, "mu0 conditional covariance")?.l();
    state.mu0 = sample_normal(&mean, &l, rng);
    Ok(())
}

/// Inverse-Wishart full conditional of `Sigma` given the initial values and `mu0`.
pub fn sigma_conditional(b0: &[Vec<f64>], mu0: &DVector<f64>, hyper: &Hyper) -> InverseWishart {
    let mut scale = hyper.psi.clone();
    for b in b0 {
        let d = DVector::from_column_slice(b) - mu0;
        scale += &d * d.transpose();
    }
    InverseWishart {
        scale,
        dof: hyper.nu + b0.len() as f64,
    }
}

pub fn gibbs_update_sigma<R: Rng + ?Sized>(
    state: &mut HierarchyState,
    hyper: &Hyper,
    rng: &mut R,
) -> Result<()> {
    state.sigma = sigma_conditional(&state.b0, &state.mu0, hyper).sample(rng)?;
    Ok(())
}

/// Per-sensor inverse-gamma full conditionals of the noise variances.
pub fn sigma_eps_conditional(stats: &ResidualStats, hyper: &Hyper) -> Vec<InverseGamma> {
    (0..stats.sse.len())
        .map(|s| InverseGamma {
            shape: hyper.noise_shape + 0.5 * stats.count[s] as f64,
            scale: hyper.noise_scale + 0.5 * stats.sse[s],
        })
        .collect()
}

/// Pooled residual statistics over all scenarios.
pub fn pooled_stats(per_scenario: &[ResidualStats], n_sensors: usize) -> ResidualStats {
    let mut total = ResidualStats::zeros(n_sensors);
    for r in per_scenario {
        for s in 0..n_sensors {
            total.sse[s] += r.sse[s];
            total.count[s] += r.count[s];
        }
    }
    total
}

/// Draws each sensor variance from its conditional; sensors without
/// observations draw from the prior.
pub fn gibbs_update_sigma_eps<R: Rng + ?Sized>(
    state: &mut HierarchyState,
    pooled: &ResidualStats,
    hyper: &Hyper,
    rng: &mut R,
) -> Result<()> {
    for (s, ig) in sigma_eps_conditional(pooled, hyper).into_iter().enumerate() {
        state.sigma_eps[s] = ig.sample(rng)?;
    }
    Ok(())
}

/// Random-walk proposal `x + exp(log_scale) L z` whose covariance adapts to
/// the chain history during warmup.
#[derive(Debug, Clone)]
pub struct AdaptiveProposal {
    k: usize,
    chol: DMatrix<f64>,
    pub log_scale: f64,
    n_hist: usize,
    hist_mean: DVector<f64>,
    hist_m2: DMatrix<f64>,
    n_adapt: usize,
    shaped: bool,
}

impl AdaptiveProposal {
    /// Starts from `(2.38^2 / k) cov`.
    pub fn new(cov: &DMatrix<f64>) -> Result<AdaptiveProposal> {
        let k = cov.nrows();
        let base = cov * (2.38 * 2.38 / k.max(1) as f64);
        let chol = if base.iter().all(|&x| x == 0.0) {
            DMatrix::zeros(k, k)
        } else {
            chol(&base, "initial proposal covariance")?.l()
        };
        Ok(AdaptiveProposal {
            k,
            chol,
            log_scale: 0.0,
            n_hist: 0,
            hist_mean: DVector::zeros(k),
            hist_m2: DMatrix::zeros(k, k),
            n_adapt: 0,
            shaped: false,
        })
    }

    pub fn propose<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let step = &self.chol * standard_normals(self.k, rng) * self.log_scale.exp();
        x.iter().zip(step.iter()).map(|(a, b)| a + b).collect()
    }

    /// Adds a chain state to the history.
    pub fn record(&mut self, x: &[f64]) {
        self.n_hist += 1;
        let xv = DVector::from_column_slice(x);
        let d = &xv - &self.hist_mean;
        self.hist_mean += &d / self.n_hist as f64;
        let d2 = xv - &self.hist_mean;
        self.hist_m2 += d * d2.transpose();
    }

    pub fn history_len(&self) -> usize {
        self.n_hist
    }

    pub fn reset_history(&mut self) {
        self.n_hist = 0;
        self.hist_mean.fill(0.0);
        self.hist_m2.fill(0.0);
    }

    /// Stochastic-approximation step of the global scale toward the target rate.
    pub fn adapt_scale(&mut self, accepted: bool, target: f64) {
        self.n_adapt += 1;
        let gain = (self.n_adapt as f64).powf(-0.6);
        self.log_scale += gain * (f64::from(u8::from(accepted)) - target);
        self.log_scale = self.log_scale.clamp(-30.0, 30.0);
    }

    /// Resets the shape to `(2.38^2 / k)` times the history covariance plus jitter.
    pub fn refresh(&mut self) {
        if self.n_hist < 2 {
            return;
        }
        let cov = &self.hist_m2 / (self.n_hist - 1) as f64;
        let tr = cov.trace() / self.k as f64;
        if !(tr > 0.0) || !tr.is_finite() {
            return;
        }
        let mut m = cov * (2.38 * 2.38 / self.k as f64);
        for i in 0..self.k {
            m[(i, i)] += 1e-8 * tr;
        }
        if let Some(c) = Cholesky::new((&m + m.transpose()) * 0.5) {
            // the first empirical shape already carries the right size
            if !self.shaped {
                self.log_scale = 0.0;
                self.shaped = true;
            }
            self.chol = c.l();
        }
    }
}

/// One Metropolis-Hastings step with a symmetric proposal. Returns the new
/// point, its log target and whether the proposal was accepted.
pub fn mh_step<R, F>(
    x: &[f64],
    logp: f64,
    proposal: &AdaptiveProposal,
    log_target: F,
    rng: &mut R,
) -> (Vec<f64>, f64, bool)
where
    R: Rng + ?Sized,
    F: FnOnce(&[f64]) -> f64,
{
    let y = proposal.propose(x, rng);
    let u: f64 = rng.random();
    let ly = log_target(&y);
    let accept = if ly == logp && ly.is_finite() {
        true
    } else if !ly.is_finite() {
        false
    } else if !logp.is_finite() {
        true
    } else {
        u.ln() < ly - logp
    };
    if accept {
        (y, ly, true)
    } else {
        (x.to_vec(), logp, false)
    }
}

/// `log N(b | mu, L L^T)` up to a constant.
pub fn log_prior(b: &[f64], mu: &DVector<f64>, l: &DMatrix<f64>) -> f64 {
    let d = DVector::from_column_slice(b) - mu;
    let z = l
        .solve_lower_triangular(&d)
        .unwrap_or_else(|| DVector::from_element(d.len(), f64::INFINITY));
    -0.5 * z.norm_squared()
}

/// Sampler schedule and adaptation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSettings {
    pub chains: usize,
    pub iterations: usize,
    pub warmup: usize,
    /// Keep every `thin`-th iterate after warmup.
    pub thin: usize,
    pub seed: u64,
    /// Chains start at the per-scenario posterior mode plus this many
    /// Laplace standard deviations of Gaussian jitter.
    pub start_dispersion: f64,
    /// Levenberg-Marquardt iterations for the posterior mode.
    pub start_iterations: usize,
    /// Warmup iterations between refreshes of the proposal shape from the
    /// chain history. Zero keeps the Laplace shape and adapts only the scale.
    pub adapt_every: usize,
    /// Fraction of warmup after which the history restarts, dropping the transient.
    pub history_restart: f64,
    pub target_acceptance: f64,
}

impl Default for McmcSettings {
    fn default() -> Self {
        McmcSettings {
            chains: 2,
            iterations: 6000,
            warmup: 5000,
            thin: 1,
            seed: 0,
            start_dispersion: 2.0,
            start_iterations: 100,
            adapt_every: 0,
            history_restart: 0.2,
            target_acceptance: TARGET_ACCEPTANCE,
        }
    }
}

/// Positions of the sampled quantities inside a flat draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub k: usize,
    pub n_scenarios: usize,
    pub n_sensors: usize,
}

impl ParamLayout {
    pub fn b0(&self, i: usize) -> usize {
        i * self.k
    }

    pub fn mu0(&self) -> usize {
        self.n_scenarios * self.k
    }

    /// Start of the lower triangle of `Sigma`, row by row.
    pub fn sigma(&self) -> usize {
        self.mu0() + self.k
    }

    pub fn sigma_eps(&self) -> usize {
        self.sigma() + self.k * (self.k + 1) / 2
    }

    pub fn len(&self) -> usize {
        self.sigma_eps() + self.n_sensors
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.n_scenarios {
            out.extend((0..self.k).map(|m| format!("b0[{i}][{m}]")));
        }
        out.extend((0..self.k).map(|m| format!("mu0[{m}]")));
        for r in 0..self.k {
            out.extend((0..=r).map(|c| format!("sigma[{r}][{c}]")));
        }
        out.extend((0..self.n_sensors).map(|s| format!("sigma_eps[{s}]")));
        out
    }

    pub fn pack(&self, st: &HierarchyState) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for b in &st.b0 {
            v.extend_from_slice(b);
        }
        v.extend(st.mu0.iter());
        for r in 0..self.k {
            for c in 0..=r {
                v.push(st.sigma[(r, c)]);
            }
        }
        v.extend_from_slice(&st.sigma_eps);
        v
    }

    pub fn unpack(&self, v: &[f64]) -> HierarchyState {
        let k = self.k;
        let b0 = (0..self.n_scenarios)
            .map(|i| v[i * k..(i + 1) * k].to_vec())
            .collect();
        let mu0 = DVector::from_column_slice(&v[self.mu0()..self.mu0() + k]);
        let mut sigma = DMatrix::zeros(k, k);
        let mut p = self.sigma();
        for r in 0..k {
            for c in 0..=r {
                sigma[(r, c)] = v[p];
                sigma[(c, r)] = v[p];
                p += 1;
            }
        }
        HierarchyState {
            b0,
            mu0,
            sigma,
            sigma_eps: v[self.sigma_eps()..self.len()].to_vec(),
        }
    }
}

/// Retained draws of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub seed: u64,
    /// Draw-major `[n_draws x layout.len()]`.
    pub draws: Vec<f64>,
    /// Post-warmup acceptance rate of each scenario's initial-value update.
    pub acceptance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub layout: ParamLayout,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorSamples {
    pub fn n_draws(&self) -> usize {
        self.chains
            .first()
            .map_or(0, |c| c.draws.len() / self.layout.len().max(1))
    }

    pub fn draw(&self, chain: usize, d: usize) -> &[f64] {
        let n = self.layout.len();
        &self.chains[chain].draws[d * n..(d + 1) * n]
    }

    pub fn state(&self, chain: usize, d: usize) -> HierarchyState {
        self.layout.unpack(self.draw(chain, d))
    }

    /// Draws of parameter `p` in chain `c`.
    pub fn trace(&self, c: usize, p: usize) -> Vec<f64> {
        (0..self.n_draws()).map(|d| self.draw(c, d)[p]).collect()
    }

    /// Pooled mean and standard deviation of every parameter.
    pub fn moments(&self) -> Vec<(f64, f64)> {
        let n = self.layout.len();
        let total = (self.chains.len() * self.n_draws()) as f64;
        let mut sum = vec![0.0; n];
        for c in 0..self.chains.len() {
            for d in 0..self.n_draws() {
                for (s, x) in sum.iter_mut().zip(self.draw(c, d)) {
                    *s += x;
                }
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / total).collect();
        let mut var = vec![0.0; n];
        for c in 0..self.chains.len() {
            for d in 0..self.n_draws() {
                for (p, x) in self.draw(c, d).iter().enumerate() {
                    var[p] += (x - mean[p]).powi(2);
                }
            }
        }
        mean.into_iter()
            .zip(var)
            .map(|(m, v)| (m, (v / (total - 1.0).max(1.0)).sqrt()))
            .collect()
    }

    pub fn mean_acceptance(&self) -> f64 {
        let all: Vec<f64> = self
            .chains
            .iter()
            .flat_map(|c| c.acceptance.iter().copied())
            .collect();
        if all.is_empty() {
            return f64::NAN;
        }
        all.iter().sum::<f64>() / all.len() as f64
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_magic(w, POSTERIOR_MAGIC)?;
        let l = &self.layout;
        for v in [
            l.k,
            l.n_scenarios,
            l.n_sensors,
            self.chains.len(),
            self.n_draws(),
        ] {
            write_u32(w, to_u32(v, "posterior dimension")?)?;
        }
        for c in &self.chains {
            write_u64(w, c.seed)?;
            write_f64s(w, &c.acceptance)?;
        }
        for c in &self.chains {
            write_f64s(w, &c.draws)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<PosteriorSamples> {
        expect_magic(r, POSTERIOR_MAGIC)?;
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = read_u32(r)? as usize;
        }
        let layout = ParamLayout {
            k: dims[0],
            n_scenarios: dims[1],
            n_sensors: dims[2],
        };
        let mut chains = Vec::with_capacity(dims[3]);
        for _ in 0..dims[3] {
            let seed = read_u64(r)?;
            let acceptance = read_f64s(r, layout.n_scenarios)?;
            chains.push(ChainDraws {
                seed,
                draws: Vec::new(),
                acceptance,
            });
        }
        for c in &mut chains {
            c.draws = read_f64s(r, dims[4] * layout.len())?;
        }
        Ok(PosteriorSamples { layout, chains })
    }

    /// Summary CSV: parameter, mean, sd, rhat.
    pub fn write_summary<W: Write>(&self, w: W) -> Result<()> {
        let rhat = gelman_rubin(self).unwrap_or_else(|_| vec![f64::NAN; self.layout.len()]);
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["parameter", "mean", "sd", "rhat"])?;
        for ((name, (m, s)), r) in self
            .layout
            .names()
            .into_iter()
            .zip(self.moments())
            .zip(rhat)
        {
            out.write_record([name, format!("{m:e}"), format!("{s:e}"), format!("{r}")])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Posterior mode of one scenario's initial values and the Laplace
/// covariance there.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceStart {
    pub b0: Vec<f64>,
    pub cov: DMatrix<f64>,
    /// Negative log posterior up to a constant, `0.5 |r|^2` over the
    /// whitened data and prior residuals.
    pub objective: f64,
    pub iterations: usize,
}

/// Whitened data residuals `(y - eta) / sqrt(sigma_eps)` followed by the
/// whitened prior residual `L^-1 (b - m)`; `None` on blowup.
fn stacked_residuals(
    b: &[f64],
    scenario: &Scenario,
    surrogate: &Surrogate,
    sigma_eps: &[f64],
    mean: &DVector<f64>,
    l: &DMatrix<f64>,
) -> Option<DVector<f64>> {
    let mut out = Vec::new();
    if let Some(last) = scenario.last_observed_row() {
        let rows = surrogate.coefficients(b, last + 1)?;
        let k = surrogate.k();
        for t in 0..=last {
            let a = &rows[t * k..(t + 1) * k];
            for s in 0..scenario.n_sensors {
                if let Some(y) = scenario.observed(t, s) {
                    out.push((y - surrogate.obs.eta(s, a)) / sigma_eps[s].sqrt());
                }
            }
        }
    }
    let d = DVector::from_column_slice(b) - mean;
    out.extend(l.solve_lower_triangular(&d)?.iter());
    Some(DVector::from_vec(out))
}

/// Levenberg-Marquardt search for the mode of `p(b | y)` under the prior
/// `N(mean, cov)` and fixed noise variances, started at the prior mean.
/// The Jacobian is taken by central differences with steps scaled to the
/// prior standard deviations.
pub fn laplace_start(
    scenario: &Scenario,
    surrogate: &Surrogate,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    sigma_eps: &[f64],
    max_iterations: usize,
) -> Result<LaplaceStart> {
    let k = mean.len();
    let l = chol(cov, "prior covariance of the initial values")?.l();
    let eval = |b: &[f64]| stacked_residuals(b, scenario, surrogate, sigma_eps, mean, &l);
    let jacobian = |b: &[f64]| -> Option<DMatrix<f64>> {
        let mut cols = Vec::with_capacity(k);
        for m in 0..k {
            let h = 1e-6 * cov[(m, m)].sqrt().max(1e-12);
            let mut bp = b.to_vec();
            let mut bm = b.to_vec();
            bp[m] += h;
            bm[m] -= h;
            cols.push((eval(&bp)? - eval(&bm)?) / (2.0 * h));
        }
        Some(DMatrix::from_columns(&cols))
    };
    let mut b: Vec<f64> = mean.iter().copied().collect();
    let mut r = eval(&b).ok_or_else(|| {
        Error::Initialization(format!(
            "scenario {}: the nGP blows up at the prior mean",
            scenario.id
        ))
    })?;
    let mut f = 0.5 * r.norm_squared();
    let mut j = jacobian(&b).ok_or_else(|| {
        Error::Initialization(format!(
            "scenario {}: blowup next to the prior mean",
            scenario.id
        ))
    })?;
    let mut lambda = 1e-3;
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let mut a = jtj.clone();
        for m in 0..k {
            a[(m, m)] += lambda * jtj[(m, m)].max(1e-12);
        }
        let Some(c) = Cholesky::new(a) else {
            lambda *= 4.0;
            continue;
        };
        let step = c.solve(&(-g));
        let trial: Vec<f64> = b.iter().zip(step.iter()).map(|(x, d)| x + d).collect();
        match eval(&trial) {
            Some(rt) if 0.5 * rt.norm_squared() < f => {
                let ft = 0.5 * rt.norm_squared();
                let done = f - ft <= 1e-10 * f.max(1.0);
                b = trial;
                r = rt;
                f = ft;
                lambda = (lambda / 3.0).max(1e-12);
                match jacobian(&b) {
                    Some(jn) => j = jn,
                    None => break,
                }
                if done {
                    break;
                }
            }
            _ => {
                lambda *= 4.0;
                if lambda > 1e10 {
                    break;
                }
            }
        }
    }
    let precision = j.transpose() * &j;
    let cov = match Cholesky::new((&precision + precision.transpose()) * 0.5) {
        Some(c) => {
            let inv = c.inverse();
            (&inv + inv.transpose()) * 0.5
        }
        None => cov.clone(),
    };
    Ok(LaplaceStart {
        b0: b,
        cov,
        objective: f,
        iterations,
    })
}

/// Noise variances at the conditional mode given residuals of `starts`.
fn noise_mode(
    scenarios: &[Scenario],
    surrogate: &Surrogate,
    starts: &[Vec<f64>],
    hyper: &Hyper,
    ns: usize,
) -> Vec<f64> {
    let finite: Vec<ResidualStats> = scenarios
        .iter()
        .zip(starts)
        .filter_map(|(sc, b)| surrogate.residuals(b, sc))
        .collect();
    sigma_eps_conditional(&pooled_stats(&finite, ns), hyper)
        .iter()
        .map(|ig| ig.scale / (ig.shape + 1.0))
        .collect()
}

/// Deterministic starting point shared by all chains: alternate the
/// per-scenario posterior modes under the marginal prior
/// `N(A0, Sigma0 + E[Sigma])` with the conditional mode of the noise.
fn find_starts(
    scenarios: &[Scenario],
    surrogate: &Surrogate,
    hyper: &Hyper,
    settings: &McmcSettings,
) -> Result<(Vec<LaplaceStart>, Vec<f64>)> {
    let ns = surrogate.obs.n_sensors();
    let a0: Vec<f64> = hyper.a0.iter().copied().collect();
    if scenarios
        .iter()
        .all(|sc| surrogate.residuals(&a0, sc).is_none())
    {
        return Err(Error::Initialization(
            "the likelihood is -inf for every scenario at the prior mean A0; check the nGP stability and start values".into(),
        ));
    }
    let sigma_mean = InverseWishart {
        scale: hyper.psi.clone(),
        dof: hyper.nu,
    }
    .mean()
    .unwrap_or_else(|| hyper.psi.clone());
    let marginal = &hyper.sigma0 + sigma_mean;
    let mut sigma_eps = noise_mode(scenarios, surrogate, &vec![a0; scenarios.len()], hyper, ns);
    let mut starts = Vec::new();
    for _ in 0..2 {
        starts = scenarios
            .par_iter()
            .map(|sc| {
                laplace_start(
                    sc,
                    surrogate,
                    &hyper.a0,
                    &marginal,
                    &sigma_eps,
                    settings.start_iterations,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let modes: Vec<Vec<f64>> = starts.iter().map(|s| s.b0.clone()).collect();
        sigma_eps = noise_mode(scenarios, surrogate, &modes, hyper, ns);
    }
    Ok((starts, sigma_eps))
}

/// Seed of chain `c` derived from the global seed.
pub fn chain_seed(seed: u64, c: usize) -> u64 {
    seed.wrapping_add((c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

struct ScenarioChain {
    b0: Vec<f64>,
    stats: Option<ResidualStats>,
    proposal: AdaptiveProposal,
    rng: ChaCha8Rng,
    accepted: usize,
}

/// Runs the sampler on every chain. Chains use independent random streams,
/// and each scenario's update inside a chain has its own stream, so the
/// result does not depend on the thread count.
pub fn run_mcmc(
    scenarios: &[Scenario],
    surrogate: &Surrogate,
    hyper: &Hyper,
    settings: &McmcSettings,
) -> Result<PosteriorSamples> {
    hyper.validate()?;
    if scenarios.is_empty() {
        return Err(Error::domain("calibration needs at least one scenario"));
    }
    if hyper.k() != surrogate.k() {
        return Err(Error::structural(format!(
            "prior rank {} does not match surrogate rank {}",
            hyper.k(),
            surrogate.k()
        )));
    }
    for sc in scenarios {
        surrogate.check_scenario(sc)?;
    }
    if settings.chains == 0
        || settings.thin == 0
        || settings.iterations < settings.warmup + settings.thin
    {
        return Err(Error::config(
            "MCMC needs at least one chain, thin >= 1 and at least one retained draw after warmup",
        ));
    }
    let layout = ParamLayout {
        k: hyper.k(),
        n_scenarios: scenarios.len(),
        n_sensors: surrogate.obs.n_sensors(),
    };
    let start = find_starts(scenarios, surrogate, hyper, settings)?;
    let chains = (0..settings.chains)
        .into_par_iter()
        .map(|c| {
            run_chain(
                scenarios,
                surrogate,
                hyper,
                settings,
                layout,
                &start,
                chain_seed(settings.seed, c),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorSamples { layout, chains })
}

fn run_chain(
    scenarios: &[Scenario],
    surrogate: &Surrogate,
    hyper: &Hyper,
    settings: &McmcSettings,
    layout: ParamLayout,
    (starts, sigma_eps): &(Vec<LaplaceStart>, Vec<f64>),
    seed: u64,
) -> Result<ChainDraws> {
    let k = layout.k;
    let ns = layout.n_sensors;
    let mut sc_chains = Vec::with_capacity(scenarios.len());
    for (i, (sc, st)) in scenarios.iter().zip(starts).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 + i as u64);
        let l = chol(&st.cov, "Laplace covariance")?.l();
        let jitter = &l * standard_normals(k, &mut rng) * settings.start_dispersion;
        let mut b0: Vec<f64> = st
            .b0
            .iter()
            .zip(jitter.iter())
            .map(|(b, d)| b + d)
            .collect();
        let mut stats = surrogate.residuals(&b0, sc);
        if stats.is_none() {
            b0.clone_from(&st.b0);
            stats = surrogate.residuals(&b0, sc);
        }
        sc_chains.push(ScenarioChain {
            b0,
            stats,
            proposal: AdaptiveProposal::new(&st.cov)?,
            rng,
            accepted: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut state = HierarchyState {
        b0: sc_chains.iter().map(|c| c.b0.clone()).collect(),
        mu0: hyper.a0.clone(),
        sigma: InverseWishart {
            scale: hyper.psi.clone(),
            dof: hyper.nu,
        }
        .mean()
        .unwrap_or_else(|| hyper.psi.clone()),
        sigma_eps: sigma_eps.to_vec(),
    };

    let restart = (settings.history_restart * settings.warmup as f64) as usize;
    let n_post = settings.iterations - settings.warmup;
    let mut draws = Vec::with_capacity(n_post / settings.thin * layout.len());
    for it in 0..settings.iterations {
        let warm = it < settings.warmup;
        let l = chol(&state.sigma, "Sigma")?.l();
        let mu0 = state.mu0.clone();
        let sig_eps = state.sigma_eps.clone();
        sc_chains
            .par_iter_mut()
            .zip(scenarios.par_iter())
            .for_each(|(ch, sc)| {
                let cur = ch
                    .stats
                    .as_ref()
                    .map_or(f64::NEG_INFINITY, |s| s.log_likelihood(&sig_eps))
                    + log_prior(&ch.b0, &mu0, &l);
                let mut new_stats = None;
                let (b, _, acc) = mh_step(
                    &ch.b0,
                    cur,
                    &ch.proposal,
                    |y| {
                        new_stats = surrogate.residuals(y, sc);
                        new_stats
                            .as_ref()
                            .map_or(f64::NEG_INFINITY, |s| s.log_likelihood(&sig_eps))
                            + log_prior(y, &mu0, &l)
                    },
                    &mut ch.rng,
                );
                if acc {
                    ch.b0 = b;
                    ch.stats = new_stats;
                }
                if warm {
                    ch.proposal.adapt_scale(acc, settings.target_acceptance);
                    if it == restart {
                        ch.proposal.reset_history();
                    }
                    ch.proposal.record(&ch.b0);
                    let n = ch.proposal.history_len();
                    if settings.adapt_every > 0
                        && n >= 2 * k.max(10)
                        && it % settings.adapt_every == 0
                    {
                        ch.proposal.refresh();
                    }
                } else if acc {
                    ch.accepted += 1;
                }
            });
        for (i, ch) in sc_chains.iter().enumerate() {
            state.b0[i].clone_from(&ch.b0);
        }
        gibbs_update_mu0(&mut state, hyper, &mut rng)?;
        gibbs_update_sigma(&mut state, hyper, &mut rng)?;
        let finite: Vec<ResidualStats> = sc_chains.iter().filter_map(|s| s.stats.clone()).collect();
        gibbs_update_sigma_eps(&mut state, &pooled_stats(&finite, ns), hyper, &mut rng)?;
        if !warm && (it - settings.warmup + 1).is_multiple_of(settings.thin) {
            draws.extend(layout.pack(&state));
        }
    }
    Ok(ChainDraws {
        seed,
        draws,
        acceptance: sc_chains
            .iter()
            .map(|c| c.accepted as f64 / n_post as f64)
            .collect(),
    })
}

/// Potential scale reduction of one scalar across chains,
/// `sqrt(1 + B / ((n - 1) W))` with `B` the between-chain variance of the
/// chain means times `n` and `W` the mean within-chain variance. Equal
/// chains give exactly one.
pub fn rhat(chains: &[Vec<f64>]) -> Result<f64> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::Diagnostic("R-hat needs at least two chains".into()));
    }
    let n = chains[0].len();
    if n < 10 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::Diagnostic(
            "R-hat needs at least ten draws per chain and equal lengths".into(),
        ));
    }
    let means: Vec<f64> = chains
        .iter()
        .map(|c| c.iter().sum::<f64>() / n as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = n as f64 * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (m - 1) as f64;
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .sum::<f64>()
        / m as f64;
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Ok((1.0 + b / ((n - 1) as f64 * w)).sqrt())
}

/// R-hat of every sampled scalar.
pub fn gelman_rubin(samples: &PosteriorSamples) -> Result<Vec<f64>> {
    if samples.chains.len() < 2 {
        return Err(Error::Diagnostic("R-hat needs at least two chains".into()));
    }
    (0..samples.layout.len())
        .map(|p| {
            let chains: Vec<Vec<f64>> = (0..samples.chains.len())
                .map(|c| samples.trace(c, p))
                .collect();
            rhat(&chains)
        })
        .collect()
}

/// Which initial values feed the predictive draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictiveLevel {
    /// Fresh `b0 ~ N(mu0, Sigma)` per draw.
    Global,
    /// The retained `b0` of one calibration scenario.
    Scenario(usize),
}

/// Pointwise posterior-predictive summaries, row-major `[n_t x n_sensors]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub times: Vec<f64>,
    pub n_sensors: usize,
    pub level: f64,
    pub mean: Vec<f64>,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
    pub pi_lo: Vec<f64>,
    pub pi_hi: Vec<f64>,
    pub draws_used: usize,
    pub excluded: usize,
}

impl Forecast {
    pub fn excluded_fraction(&self) -> f64 {
        self.excluded as f64 / (self.draws_used + self.excluded).max(1) as f64
    }

    pub fn idx(&self, t: usize, s: usize) -> usize {
        t * self.n_sensors + s
    }

    /// Fraction of finite `truth` entries of sensor `s` inside the prediction interval.
    pub fn pi_coverage(&self, s: usize, truth: &[f64]) -> f64 {
        let mut hit = 0usize;
        let mut n = 0usize;
        for (t, &y) in truth.iter().enumerate().take(self.times.len()) {
            if y.is_finite() {
                n += 1;
                let p = self.idx(t, s);
                if y >= self.pi_lo[p] && y <= self.pi_hi[p] {
                    hit += 1;
                }
            }
        }
        hit as f64 / n.max(1) as f64
    }

    /// Mean absolute error of the predictive mean of sensor `s`.
    pub fn mean_abs_error(&self, s: usize, truth: &[f64]) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (t, &y) in truth.iter().enumerate().take(self.times.len()) {
            if y.is_finite() {
                sum += (y - self.mean[self.idx(t, s)]).abs();
                n += 1;
            }
        }
        sum / n.max(1) as f64
    }

    /// Per-sensor CSV: time, mean, ci_lo, ci_hi, pi_lo, pi_hi.
    pub fn write_sensor_csv<W: Write>(&self, s: usize, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["time", "mean", "ci_lo", "ci_hi", "pi_lo", "pi_hi"])?;
        for t in 0..self.times.len() {
            let p = self.idx(t, s);
            out.write_record(
                [
                    self.times[t],
                    self.mean[p],
                    self.ci_lo[p],
                    self.ci_hi[p],
                    self.pi_lo[p],
                    self.pi_hi[p],
                ]
                .map(|x| x.to_string()),
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Posterior predictive at the surrogate's sensors over `n_rows` time rows.
///
/// `noise_of[s]` names the calibrated sensor whose noise variance applies to
/// output sensor `s`; `None` uses the mean variance over calibrated sensors.
/// The prediction band is widened where needed so that it contains the
/// credible band. Draws whose nGP solve blows up are excluded and counted.
pub fn posterior_predictive(
    samples: &PosteriorSamples,
    surrogate: &Surrogate,
    noise_of: &[Option<usize>],
    times: &[f64],
    level: PredictiveLevel,
    interval: f64,
    seed: u64,
) -> Result<Forecast> {
    let ns = surrogate.obs.n_sensors();
    let n_rows = times.len();
    if samples.n_draws() == 0 || samples.chains.is_empty() {
        return Err(Error::domain("posterior has no draws"));
    }
    if noise_of.len() != ns {
        return Err(Error::structural(
            "noise map length does not match the sensors",
        ));
    }
    if !(interval > 0.0 && interval < 1.0) {
        return Err(Error::domain(format!(
            "interval level {interval} outside (0, 1)"
        )));
    }
    if let PredictiveLevel::Scenario(i) = level {
        if i >= samples.layout.n_scenarios {
            return Err(Error::domain(format!(
                "scenario {i} is not in the posterior"
            )));
        }
    }
    if samples.layout.k != surrogate.k() {
        return Err(Error::structural(
            "posterior rank does not match the surrogate",
        ));
    }
    let n_cal = samples.layout.n_sensors;
    if noise_of.iter().flatten().any(|&s| s >= n_cal) {
        return Err(Error::structural("noise map names an uncalibrated sensor"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut recon: Vec<Vec<f64>> = Vec::new();
    let mut noisy: Vec<Vec<f64>> = Vec::new();
    let mut excluded = 0usize;
    for c in 0..samples.chains.len() {
        for d in 0..samples.n_draws() {
            let st = samples.state(c, d);
            let b0 = match level {
                PredictiveLevel::Scenario(i) => DVector::from_column_slice(&st.b0[i]),
                PredictiveLevel::Global => match Cholesky::new(st.sigma.clone()) {
                    Some(ch) => sample_normal(&st.mu0, &ch.l(), &mut rng),
                    None if st.sigma.iter().all(|&x| x == 0.0) => st.mu0.clone(),
                    None => {
                        excluded += 1;
                        continue;
                    }
                },
            };
            let pooled = if st.sigma_eps.is_empty() {
                0.0
            } else {
                st.sigma_eps.iter().sum::<f64>() / st.sigma_eps.len() as f64
            };
            let var: Vec<f64> = noise_of
                .iter()
                .map(|m| m.map_or(pooled, |s| st.sigma_eps[s]))
                .collect();
            let Some(y) = surrogate.predict(b0.as_slice(), n_rows) else {
                excluded += 1;
                continue;
            };
            let with_noise: Vec<f64> = y
                .iter()
                .enumerate()
                .map(|(p, v)| v + var[p % ns].sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            recon.push(y);
            noisy.push(with_noise);
        }
    }
    if recon.is_empty() {
        return Err(Error::numerical("every predictive draw blew up"));
    }
    let n = n_rows * ns;
    let (qlo, qhi) = ((1.0 - interval) / 2.0, (1.0 + interval) / 2.0);
    let mut f = Forecast {
        times: times.to_vec(),
        n_sensors: ns,
        level: interval,
        mean: vec![0.0; n],
        ci_lo: vec![0.0; n],
        ci_hi: vec![0.0; n],
        pi_lo: vec![0.0; n],
        pi_hi: vec![0.0; n],
        draws_used: recon.len(),
        excluded,
    };
    let mut col = vec![0.0; recon.len()];
    for p in 0..n {
        for (x, r) in col.iter_mut().zip(&recon) {
            *x = r[p];
        }
        f.mean[p] = col.iter().sum::<f64>() / col.len() as f64;
        col.sort_by(f64::total_cmp);
        f.ci_lo[p] = quantile_sorted(&col, qlo);
        f.ci_hi[p] = quantile_sorted(&col, qhi);
        for (x, r) in col.iter_mut().zip(&noisy) {
            *x = r[p];
        }
        col.sort_by(f64::total_cmp);
        f.pi_lo[p] = quantile_sorted(&col, qlo).min(f.ci_lo[p]);
        f.pi_hi[p] = quantile_sorted(&col, qhi).max(f.ci_hi[p]);
    }
    Ok(f)
}
