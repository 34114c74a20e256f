//! Deterministic fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use randprom::galerkin::RomOperators;
use randprom::swe_sim::{gaussian_initial_condition, FlowState, Grid};

/// Damped random operators of rank `k` with a weak quadratic term.
pub fn random_operators(k: usize, seed: u64) -> RomOperators {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = RomOperators::zeros(k);
    for c in ops.c.iter_mut() {
        *c = rng.random_range(-0.01..0.01);
    }
    for i in 0..k {
        for m in 0..k {
            ops.l[i * k + m] = if i == m {
                -0.05
            } else {
                rng.random_range(-0.1..0.1) / k as f64
            };
        }
    }
    for q in ops.q.iter_mut() {
        *q = rng.random_range(-0.01..0.01) / (k * k) as f64;
    }
    ops
}

/// Closed square basin with a Gaussian hump in the middle.
pub fn basin(n: usize) -> (Grid, FlowState) {
    let grid = Grid::planar(n, n, 20_000.0, 20_000.0, 4000.0).expect("valid grid");
    let (lon, lat) = grid.cell_center(n / 2, n / 2);
    let state =
        gaussian_initial_condition(&grid, lon, lat, 2.0, 60_000.0, 1.0).expect("valid hump");
    (grid, state)
}
