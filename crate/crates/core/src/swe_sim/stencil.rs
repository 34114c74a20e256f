//! Finite-difference derivative operators shared by the solver and the
//! Galerkin operator assembly.
//!
//! Interior cells use second-order centred differences. A missing neighbour
//! is replaced by a mirrored ghost value when it is land or a wall (sign set by
//! the field's [`Parity`] across that face), by the wrapped value on periodic
//! edges, and by a one-sided second-order difference on outflow edges. All
//! operators are linear in the input field. Land cells get a zero derivative.

use super::grid::{EdgeKind, Grid};

/// Reflection behaviour of a field across a wall normal to the derivative
/// direction: normal velocities (and fluxes) are odd, everything else even.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    #[inline]
    fn ghost(self, v: f64) -> f64 {
        match self {
            Parity::Even => v,
            Parity::Odd => -v,
        }
    }
}

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
}

/// `d field / dx` into `out`.
pub fn ddx(grid: &Grid, field: &[f64], parity: Parity, out: &mut [f64]) {
    derivative(grid, field, parity, Axis::X, out);
}

/// `d field / dy` into `out`.
pub fn ddy(grid: &Grid, field: &[f64], parity: Parity, out: &mut [f64]) {
    derivative(grid, field, parity, Axis::Y, out);
}

fn derivative(grid: &Grid, field: &[f64], parity: Parity, axis: Axis, out: &mut [f64]) {
    debug_assert_eq!(field.len(), grid.len());
    debug_assert_eq!(out.len(), grid.len());
    let (n_along, stride, h, edge) = match axis {
        Axis::X => (grid.nx, 1usize, grid.dx, grid.edges.x),
        Axis::Y => (grid.ny, grid.nx, grid.dy, grid.edges.y),
    };
    let n_lines = match axis {
        Axis::X => grid.ny,
        Axis::Y => grid.nx,
    };
    let inv2h = 0.5 / h;
    let invh = 1.0 / h;

    for line in 0..n_lines {
        let base = match axis {
            Axis::X => line * grid.nx,
            Axis::Y => line,
        };
        let at = |p: usize| base + p * stride;
        for p in 0..n_along {
            let c = at(p);
            if !grid.is_wet(c) {
                out[c] = 0.0;
                continue;
            }
            let fc = field[c];
            // Some(value) for a usable neighbour value (real or ghost),
            // None where an outflow edge demands a one-sided difference.
            let neighbour = |q: Option<usize>| -> Option<f64> {
                match q {
                    Some(q) => {
                        let cq = at(q);
                        Some(if grid.is_wet(cq) {
                            field[cq]
                        } else {
                            parity.ghost(fc)
                        })
                    }
                    None => match edge {
                        EdgeKind::Wall => Some(parity.ghost(fc)),
                        EdgeKind::Outflow => None,
                        EdgeKind::Periodic => unreachable!("periodic neighbours always exist"),
                    },
                }
            };
            let wrap = edge == EdgeKind::Periodic;
            let east_idx = if p + 1 < n_along {
                Some(p + 1)
            } else if wrap {
                Some(0)
            } else {
                None
            };
            let west_idx = if p > 0 {
                Some(p - 1)
            } else if wrap {
                Some(n_along - 1)
            } else {
                None
            };
            let east = neighbour(east_idx);
            let west = neighbour(west_idx);
            out[c] = match (west, east) {
                (Some(w), Some(e)) => (e - w) * inv2h,
                (Some(w), None) => {
                    // backward one-sided; second order when two wet cells are available
                    let w2 = (p >= 2).then(|| at(p - 2)).filter(|&c2| grid.is_wet(c2));
                    let w1_wet = grid.is_wet(at(p - 1));
                    match (w1_wet, w2) {
                        (true, Some(c2)) => (3.0 * fc - 4.0 * w + field[c2]) * inv2h,
                        _ => (fc - w) * invh,
                    }
                }
                (None, Some(e)) => {
                    let e2 = (p + 2 < n_along)
                        .then(|| at(p + 2))
                        .filter(|&c2| grid.is_wet(c2));
                    let e1_wet = grid.is_wet(at(p + 1));
                    match (e1_wet, e2) {
                        (true, Some(c2)) => (-3.0 * fc + 4.0 * e - field[c2]) * inv2h,
                        _ => (e - fc) * invh,
                    }
                }
                (None, None) => 0.0,
            };
        }
    }
}
