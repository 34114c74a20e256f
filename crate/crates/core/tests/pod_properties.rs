use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use randprom::pod::{
    decompose, reconstruction_error, ric_curve, truncate, truncation_error, ModalBasis,
    SnapshotMatrix, Truncation,
};

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn hand_checkable_matrix_matches_eigen_oracle() {
    let raw = DMatrix::from_row_slice(
        4,
        4,
        &[
            2.0, 0.0, 1.0, -1.0, //
            1.0, 3.0, 0.0, 2.0, //
            0.0, -1.0, 4.0, 1.0, //
            1.0, 1.0, 1.0, 0.0,
        ],
    );
    let q = SnapshotMatrix::from_raw(raw).unwrap();
    let b = decompose(&q).unwrap();
    let qqt = &q.data * q.data.transpose();
    let eig = SymmetricEigen::new(qqt);
    let mut pairs: Vec<(f64, usize)> = eig.eigenvalues.iter().copied().zip(0..4).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    // mean subtraction leaves rank 3: the last pair is the null direction
    for (r, &(lam, idx)) in pairs.iter().take(3).enumerate() {
        let s = b.singular_values[r];
        assert!(
            (s * s - lam).abs() < 1e-10 * lam.max(1.0),
            "sigma^2 {} vs eigenvalue {lam}",
            s * s
        );
        let v = eig.eigenvectors.column(idx);
        let d = b.modes.column(r).dot(&v).abs();
        assert!(
            (d - 1.0).abs() < 1e-10,
            "mode {r} misaligned: |<phi, v>| = {d}"
        );
    }
    assert!(b.singular_values[3] < 1e-12);
}

#[test]
fn pod_beats_random_orthonormal_bases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // low-rank signal plus noise
    let raw = random_matrix(30, 3, &mut rng) * random_matrix(3, 12, &mut rng)
        + random_matrix(30, 12, &mut rng) * 0.1;
    let q = SnapshotMatrix::from_raw(raw).unwrap();
    let full = decompose(&q).unwrap();
    for k in [1usize, 2, 4] {
        let (b, _) = truncate(&full, Truncation::Rank(k)).unwrap();
        let pod_err = reconstruction_error(&b, &q);
        for _ in 0..100 {
            let basis = random_matrix(30, k, &mut rng).qr().q();
            let proj = &basis * (basis.transpose() * &q.data);
            let err = (&q.data - proj).norm() / q.data.norm();
            assert!(
                pod_err <= err + 1e-12,
                "rank {k}: POD {pod_err} > random {err}"
            );
        }
    }
}

#[test]
fn truncation_error_formula_matches_direct_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = SnapshotMatrix::from_raw(random_matrix(40, 15, &mut rng)).unwrap();
    let full = decompose(&q).unwrap();
    for k in 1..=full.n_modes() {
        let (b, rep) = truncate(&full, Truncation::Rank(k)).unwrap();
        let direct = reconstruction_error(&b, &q);
        assert!(
            (direct - rep.relative_error).abs() < 1e-10,
            "k={k}: {direct} vs {}",
            rep.relative_error
        );
        assert!((truncation_error(&full.singular_values, k) - rep.relative_error).abs() == 0.0);
    }
    let (same, rep) = truncate(&full, Truncation::Rank(full.n_modes())).unwrap();
    assert_eq!(same.modes, full.modes);
    assert!(rep.relative_error == 0.0);
}

#[test]
fn unattainable_ric_reports_the_maximum() {
    let b = ModalBasis {
        modes: DMatrix::identity(3, 2),
        singular_values: vec![2.0, 1.0],
        coeffs: DMatrix::zeros(2, 2),
        rank: 2,
        mean: nalgebra::DVector::zeros(3),
        scales: [1.0; 3],
    };
    assert!(truncate(&b, Truncation::Ric(0.0)).is_err());
    assert_eq!(truncate(&b, Truncation::Ric(1.0)).unwrap().0.rank, 2);
}

#[test]
fn basis_file_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = SnapshotMatrix::from_raw(random_matrix(12, 5, &mut rng)).unwrap();
    let (b, _) = truncate(&decompose(&q).unwrap(), Truncation::Rank(2)).unwrap();
    let bytes = b.to_bytes().unwrap();
    assert_eq!(&bytes[..6], b"RPBAS1");
    assert_eq!(bytes.len(), 6 + 16 + 8 * (12 + 12 * 5 + 5 + 5 * 5));
    let back = ModalBasis::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, b);
    assert!(ModalBasis::read_from(&mut &bytes[..40]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decomposition_invariants(rows in 4usize..40, cols in 2usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = SnapshotMatrix::from_raw(random_matrix(rows, cols, &mut rng)).unwrap();
        let b = decompose(&q).unwrap();
        prop_assert_eq!(b.n_modes(), rows.min(cols));
        // mean subtraction removes one direction, so check orthonormality over the nonzero modes
        let smax = b.singular_values[0];
        let nz = b.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
        let (bt, _) = truncate(&b, Truncation::Rank(nz)).unwrap();
        prop_assert!(bt.orthonormality_defect() < 1e-10);
        prop_assert!(b.singular_values.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(reconstruction_error(&b, &q) < 1e-8);
        for i in 0..b.n_modes() {
            let col = b.modes.column(i);
            let imax = col.iamax();
            prop_assert!(col[imax] >= 0.0);
        }
        let curve = ric_curve(&b.singular_values).unwrap();
        prop_assert!(curve.windows(2).all(|w| w[1] >= w[0]));
        prop_assert_eq!(*curve.last().unwrap(), 1.0);
        let again = decompose(&q).unwrap();
        prop_assert_eq!(again, b);
    }

    #[test]
    fn row_means_vanish(rows in 2usize..30, cols in 2usize..15, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = random_matrix(rows, cols, &mut rng) * 100.0;
        let scale = raw.amax();
        let q = SnapshotMatrix::from_raw(raw).unwrap();
        for r in 0..rows {
            prop_assert!(q.data.row(r).sum().abs() / cols as f64 <= 1e-12 * scale);
        }
    }
}
