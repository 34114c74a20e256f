//! Proper orthogonal decomposition by the method of snapshots.
//!
//! Each snapshot column stacks the `h`, `u` and `v` fields (in that order,
//! each row-major over the grid). The temporal mean of every row is removed
//! before the SVD; coefficients are the projections `A[t, i] = <Q[:, t], phi_i>`
//! so that `Q = Phi A^T`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::binio::*;
use crate::error::{Error, Result};
use crate::swe_sim::SnapshotSet;

pub const BASIS_MAGIC: &[u8; 6] = b"RPBAS1";

/// Mean-subtracted snapshot matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    /// `Q = q - mean`, shape `[n_state x n_t]`.
    pub data: DMatrix<f64>,
    /// Temporal mean of every row of the raw snapshot matrix.
    pub mean: DVector<f64>,
    /// Per-field multipliers applied before stacking (`h`, `u`, `v`).
    pub scales: [f64; 3],
}

impl SnapshotMatrix {
    /// Mean-subtract an arbitrary raw matrix whose columns are states.
    pub fn from_raw(mut data: DMatrix<f64>) -> Result<SnapshotMatrix> {
        if data.ncols() < 2 {
            return Err(Error::domain(format!(
                "need at least 2 snapshots, got {}",
                data.ncols()
            )));
        }
        let mean = data.column_mean();
        for mut col in data.column_iter_mut() {
            col -= &mean;
        }
        Ok(SnapshotMatrix {
            data,
            mean,
            scales: [1.0; 3],
        })
    }

    pub fn n_state(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_t(&self) -> usize {
        self.data.ncols()
    }

    /// Column `t` of the raw (not mean-subtracted) matrix.
    pub fn raw_column(&self, t: usize) -> DVector<f64> {
        self.data.column(t) + &self.mean
    }
}

/// Stack the frames of a snapshot set column by column and remove the row means.
pub fn assemble(snapshots: &SnapshotSet) -> Result<SnapshotMatrix> {
    assemble_scaled(snapshots, [1.0; 3])
}

/// As [`assemble`], multiplying the `h`, `u`, `v` blocks by `scales`.
pub fn assemble_scaled(snapshots: &SnapshotSet, scales: [f64; 3]) -> Result<SnapshotMatrix> {
    snapshots.validate()?;
    let n_t = snapshots.len();
    if n_t < 2 {
        return Err(Error::domain(format!(
            "need at least 2 snapshots, got {n_t}"
        )));
    }
    if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::config("field scales must be positive"));
    }
    let n = snapshots.grid.len();
    let mut data = DMatrix::<f64>::zeros(3 * n, n_t);
    for (t, s) in snapshots.states.iter().enumerate() {
        let mut col = data.column_mut(t);
        for (b, f) in [&s.h, &s.u, &s.v].into_iter().enumerate() {
            for c in 0..n {
                col[b * n + c] = scales[b] * f[c];
            }
        }
    }
    let mut snap = SnapshotMatrix::from_raw(data)?;
    snap.scales = scales;
    Ok(snap)
}

/// POD modes, singular values and coefficient trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalBasis {
    /// Orthonormal modes as columns, `[n_state x B]`.
    pub modes: DMatrix<f64>,
    /// Nonincreasing singular values, length `B`.
    pub singular_values: Vec<f64>,
    /// Coefficients `A[t, i]`, `[n_t x B]`.
    pub coeffs: DMatrix<f64>,
    /// Number of retained modes `k <= B`.
    pub rank: usize,
    /// Temporal mean of the snapshot matrix.
    pub mean: DVector<f64>,
    pub scales: [f64; 3],
}

impl ModalBasis {
    pub fn n_state(&self) -> usize {
        self.modes.nrows()
    }

    /// Total number of modes `B`.
    pub fn n_modes(&self) -> usize {
        self.modes.ncols()
    }

    pub fn n_t(&self) -> usize {
        self.coeffs.nrows()
    }

    /// First `rank` modes.
    pub fn truncated_modes(&self) -> DMatrix<f64> {
        self.modes.columns(0, self.rank).into_owned()
    }

    /// First `rank` coefficient columns, `[n_t x k]`.
    pub fn truncated_coeffs(&self) -> DMatrix<f64> {
        self.coeffs.columns(0, self.rank).into_owned()
    }

    /// `max |A_ij|` over the retained coefficients.
    pub fn coeff_max_abs(&self) -> f64 {
        self.coeffs
            .columns(0, self.rank)
            .iter()
            .fold(0.0, |m: f64, x| m.max(x.abs()))
    }

    /// Max-norm deviation of `Phi^T Phi` from the identity over the retained modes.
    pub fn orthonormality_defect(&self) -> f64 {
        let m = self.modes.columns(0, self.rank);
        let g = m.transpose() * m;
        let mut d: f64 = 0.0;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                d = d.max((g[(i, j)] - target).abs());
            }
        }
        d
    }

    /// Encode in the `RPBAS1` little-endian layout.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_magic(w, BASIS_MAGIC)?;
        write_u32(w, to_u32(self.n_state(), "n_state")?)?;
        write_u32(w, to_u32(self.n_modes(), "B")?)?;
        write_u32(w, to_u32(self.rank, "k")?)?;
        write_u32(w, to_u32(self.n_t(), "n_t")?)?;
        write_f64s(w, self.mean.as_slice())?;
        // nalgebra storage is column-major
        write_f64s(w, self.modes.as_slice())?;
        write_f64s(w, &self.singular_values)?;
        for t in 0..self.n_t() {
            for i in 0..self.n_modes() {
                write_f64(w, self.coeffs[(t, i)])?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    /// Decode an `RPBAS1` stream. Field scales are not part of the file and
    /// default to one.
    pub fn read_from<R: Read>(r: &mut R) -> Result<ModalBasis> {
        expect_magic(r, BASIS_MAGIC)?;
        let n_state = read_u32(r)? as usize;
        let b = read_u32(r)? as usize;
        let k = read_u32(r)? as usize;
        let n_t = read_u32(r)? as usize;
        if k > b {
            return Err(Error::format(format!("rank {k} exceeds mode count {b}")));
        }
        let mean = DVector::from_vec(read_f64s(r, n_state)?);
        let modes = DMatrix::from_vec(n_state, b, read_f64s(r, n_state * b)?);
        let singular_values = read_f64s(r, b)?;
        let coeffs = DMatrix::from_row_slice(n_t, b, &read_f64s(r, n_t * b)?);
        Ok(ModalBasis {
            modes,
            singular_values,
            coeffs,
            rank: k,
            mean,
            scales: [1.0; 3],
        })
    }
}

/// Thin SVD of the mean-subtracted snapshots; every mode is retained.
///
/// Modes are sorted by decreasing singular value and signed so that the
/// largest-magnitude entry of each mode is positive.
pub fn decompose(snap: &SnapshotMatrix) -> Result<ModalBasis> {
    let q = &snap.data;
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical(
            "snapshot matrix contains non-finite entries",
        ));
    }
    let (m, n) = q.shape();
    let b = m.min(n);
    let max_iter = 200 * b.max(1) * b.max(1);
    let svd = q
        .clone()
        .try_svd(true, false, f64::EPSILON, max_iter)
        .ok_or_else(|| {
            let fro = q.norm();
            Error::numerical(format!(
                "SVD did not converge within {max_iter} iterations ({m}x{n} matrix, Frobenius norm {fro:e})"
            ))
        })?;
    let u = svd.u.expect("left singular vectors requested");
    let s = svd.singular_values;

    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let mut modes = DMatrix::<f64>::zeros(m, b);
    let mut singular_values = Vec::with_capacity(b);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = u.column(src).into_owned();
        let (imax, _) = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, v)| {
                if v.abs() > bv {
                    (i, v.abs())
                } else {
                    (bi, bv)
                }
            });
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        modes.set_column(dst, &col);
        singular_values.push(s[src]);
    }
    let coeffs = q.transpose() * &modes;
    Ok(ModalBasis {
        modes,
        singular_values,
        coeffs,
        rank: b,
        mean: snap.mean.clone(),
        scales: snap.scales,
    })
}

/// Relative informational content `sum_{i<=n} s_i / sum_i s_i`.
pub fn ric(singular_values: &[f64], n: usize) -> Result<f64> {
    let b = singular_values.len();
    if n < 1 || n > b {
        return Err(Error::domain(format!("RIC index {n} outside 1..={b}")));
    }
    let total: f64 = singular_values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("singular values sum to zero".into()));
    }
    if n == b {
        return Ok(1.0);
    }
    let partial: f64 = singular_values[..n].iter().sum();
    Ok((partial / total).min(1.0))
}

/// Full RIC curve `ric(1..=B)`.
pub fn ric_curve(singular_values: &[f64]) -> Result<Vec<f64>> {
    (1..=singular_values.len())
        .map(|n| ric(singular_values, n))
        .collect()
}

/// Smallest `n` with `ric(n) >= threshold`.
pub fn modes_for_ric(singular_values: &[f64], threshold: f64) -> Result<usize> {
    let curve = ric_curve(singular_values)?;
    curve
        .iter()
        .position(|&r| r >= threshold)
        .map(|p| p + 1)
        .ok_or(Error::Unattainable {
            requested: threshold,
            max: 1.0,
        })
}

/// Rule-of-thumb rank: ten percent of the available modes, rounded up.
pub fn default_rank(n_modes: usize) -> usize {
    ((0.10 * n_modes as f64).ceil() as usize).max(1)
}

/// Requested truncation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Truncation {
    Rank(usize),
    Ric(f64),
    /// Ten percent of the modes.
    Default,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationReport {
    pub rank: usize,
    pub ric: f64,
    /// `sqrt(sum_{i>k} s_i^2 / sum_i s_i^2)`: relative Frobenius error of the rank-k reconstruction.
    pub relative_error: f64,
}

/// Relative Frobenius truncation error predicted by the singular values.
pub fn truncation_error(singular_values: &[f64], k: usize) -> f64 {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 0.0;
    }
    let tail: f64 = singular_values[k.min(singular_values.len())..]
        .iter()
        .map(|s| s * s)
        .sum();
    (tail / total).sqrt()
}

/// Keep the leading modes per `target`.
pub fn truncate(basis: &ModalBasis, target: Truncation) -> Result<(ModalBasis, TruncationReport)> {
    let b = basis.n_modes();
    let k = match target {
        Truncation::Rank(k) => {
            if k < 1 || k > b {
                return Err(Error::domain(format!("rank {k} outside 1..={b}")));
            }
            k
        }
        Truncation::Ric(th) => {
            if !(th > 0.0 && th <= 1.0) {
                return Err(Error::domain(format!("RIC threshold {th} outside (0, 1]")));
            }
            let curve = ric_curve(&basis.singular_values)?;
            match curve.iter().position(|&r| r >= th) {
                Some(p) => p + 1,
                None => {
                    return Err(Error::Unattainable {
                        requested: th,
                        max: curve.last().copied().unwrap_or(0.0),
                    })
                }
            }
        }
        Truncation::Default => default_rank(b),
    };
    let ric_k = ric(&basis.singular_values, k).unwrap_or(1.0);
    let report = TruncationReport {
        rank: k,
        ric: ric_k,
        relative_error: truncation_error(&basis.singular_values, k),
    };
    let mut out = basis.clone();
    out.rank = k;
    Ok((out, report))
}

/// Directly computed `||Q - Phi_k A_k^T||_F / ||Q||_F`.
pub fn reconstruction_error(basis: &ModalBasis, snap: &SnapshotMatrix) -> f64 {
    let k = basis.rank;
    let approx = basis.modes.columns(0, k) * basis.coeffs.columns(0, k).transpose();
    let norm = snap.data.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (&snap.data - approx).norm() / norm
}
