use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const EARTH_ROTATION: f64 = 7.292_115e-5;

/// Treatment of an open (non-land) domain edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    /// Reflective wall: mirrored ghost cells, zero normal flux.
    Wall,
    /// Wrap-around.
    Periodic,
    /// Open edge with one-sided differences and an optional sponge layer.
    Outflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edges {
    pub x: EdgeKind,
    pub y: EdgeKind,
}

impl Default for Edges {
    fn default() -> Self {
        Edges {
            x: EdgeKind::Wall,
            y: EdgeKind::Wall,
        }
    }
}

/// Structured cell-centred grid with bathymetry and physical constants.
///
/// Fields are stored row-major, index `j * nx + i` with `j` the row
/// (latitude / y) and `i` the column (longitude / x). Cell `(0, 0)` spans
/// `[lon_min, lon_min + dlon] x [lat_min, lat_min + dlat]`. Metric spacing
/// `dx`, `dy` is uniform (planar projection about a reference latitude).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub lon_min: f64,
    pub lat_min: f64,
    pub dlon: f64,
    pub dlat: f64,
    /// Bed elevation relative to the rest surface (m, negative under water).
    pub bathymetry: Vec<f64>,
    /// Coriolis parameter per cell (1/s).
    pub coriolis: Vec<f64>,
    pub gravity: f64,
    /// Quadratic bottom-drag coefficient (dimensionless).
    pub drag: f64,
    pub edges: Edges,
    /// Linear relaxation rate toward rest per cell (1/s); nonzero only near outflow edges.
    pub sponge: Vec<f64>,
    /// Velocities are zeroed where the water column is thinner than this.
    pub h_min: f64,
}

impl Grid {
    /// Flat-bottom planar grid with walls, no rotation and no drag.
    pub fn planar(nx: usize, ny: usize, dx: f64, dy: f64, depth: f64) -> Result<Grid> {
        let n = nx * ny;
        let deg = 180.0 / (std::f64::consts::PI * EARTH_RADIUS_M);
        let grid = Grid {
            nx,
            ny,
            dx,
            dy,
            lon_min: 0.0,
            lat_min: 0.0,
            dlon: dx * deg,
            dlat: dy * deg,
            bathymetry: vec![-depth; n],
            coriolis: vec![0.0; n],
            gravity: 9.81,
            drag: 0.0,
            edges: Edges::default(),
            sponge: vec![0.0; n],
            h_min: 1e-6,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Geographic grid spanning the given lon/lat box; metric spacing is taken
    /// at the box's central latitude.
    pub fn geographic(
        nx: usize,
        ny: usize,
        lon_range: (f64, f64),
        lat_range: (f64, f64),
        depth: f64,
    ) -> Result<Grid> {
        if !(lon_range.1 > lon_range.0 && lat_range.1 > lat_range.0) {
            return Err(Error::config("grid extents must be increasing"));
        }
        let dlon = (lon_range.1 - lon_range.0) / nx as f64;
        let dlat = (lat_range.1 - lat_range.0) / ny as f64;
        let lat_c = 0.5 * (lat_range.0 + lat_range.1);
        let rad = std::f64::consts::PI / 180.0;
        let dx = EARTH_RADIUS_M * lat_c.to_radians().cos() * dlon * rad;
        let dy = EARTH_RADIUS_M * dlat * rad;
        let mut grid = Grid::planar(nx, ny, dx, dy, depth)?;
        grid.lon_min = lon_range.0;
        grid.lat_min = lat_range.0;
        grid.dlon = dlon;
        grid.dlat = dlat;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dx > 0.0 && self.dy > 0.0) {
            return Err(Error::config(format!(
                "grid spacing must be positive (dx = {}, dy = {})",
                self.dx, self.dy
            )));
        }
        if self.nx < 8 || self.ny < 8 {
            return Err(Error::config(format!(
                "grid must be at least 8x8 (got {}x{})",
                self.nx, self.ny
            )));
        }
        let n = self.len();
        for (name, len) in [
            ("bathymetry", self.bathymetry.len()),
            ("coriolis", self.coriolis.len()),
            ("sponge", self.sponge.len()),
        ] {
            if len != n {
                return Err(Error::structural(format!(
                    "{name} has {len} entries, grid has {n} cells"
                )));
            }
        }
        if self.bathymetry.iter().any(|z| !z.is_finite()) {
            return Err(Error::config("bathymetry must be finite everywhere"));
        }
        if !(self.gravity > 0.0 && self.gravity.is_finite()) {
            return Err(Error::config("gravity must be positive"));
        }
        if !(self.drag >= 0.0 && self.drag.is_finite()) {
            return Err(Error::config("drag coefficient must be nonnegative"));
        }
        if self.sponge.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::config("sponge rates must be nonnegative"));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Ocean cell (bed below the rest surface). Cells with `z_b >= 0` are land.
    #[inline]
    pub fn is_wet(&self, idx: usize) -> bool {
        self.bathymetry[idx] < 0.0
    }

    pub fn wet_count(&self) -> usize {
        (0..self.len()).filter(|&c| self.is_wet(c)).count()
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    /// Rest thickness `max(-z_b, 0)`.
    #[inline]
    pub fn rest_depth(&self, idx: usize) -> f64 {
        (-self.bathymetry[idx]).max(0.0)
    }

    /// Longitude/latitude of a cell centre.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.lon_min + (i as f64 + 0.5) * self.dlon,
            self.lat_min + (j as f64 + 0.5) * self.dlat,
        )
    }

    /// Cell containing a lon/lat point, if inside the domain.
    pub fn locate(&self, lon: f64, lat: f64) -> Option<(usize, usize)> {
        let fi = (lon - self.lon_min) / self.dlon;
        let fj = (lat - self.lat_min) / self.dlat;
        if !(fi >= 0.0 && fj >= 0.0) {
            return None;
        }
        let (i, j) = (fi.floor() as usize, fj.floor() as usize);
        (i < self.nx && j < self.ny).then_some((i, j))
    }

    /// Metric offset (m) of a cell centre from a lon/lat point.
    pub fn metric_offset(&self, i: usize, j: usize, lon: f64, lat: f64) -> (f64, f64) {
        let x = (i as f64 + 0.5) * self.dx - (lon - self.lon_min) / self.dlon * self.dx;
        let y = (j as f64 + 0.5) * self.dy - (lat - self.lat_min) / self.dlat * self.dy;
        (x, y)
    }

    /// Largest wet rest depth.
    pub fn max_depth(&self) -> f64 {
        (0..self.len())
            .filter(|&c| self.is_wet(c))
            .map(|c| self.rest_depth(c))
            .fold(0.0, f64::max)
    }

    /// Set `f = 2 Omega sin(lat)` row by row.
    pub fn set_latitude_coriolis(&mut self) {
        for j in 0..self.ny {
            let (_, lat) = self.cell_center(0, j);
            let f = 2.0 * EARTH_ROTATION * lat.to_radians().sin();
            for i in 0..self.nx {
                let c = self.idx(i, j);
                self.coriolis[c] = f;
            }
        }
    }

    /// Quadratically ramped sponge along outflow edges: rate `rate` at the
    /// edge decaying to zero `cells` cells inward.
    pub fn set_sponge(&mut self, cells: usize, rate: f64) {
        self.sponge.iter_mut().for_each(|s| *s = 0.0);
        if cells == 0 || rate == 0.0 {
            return;
        }
        let w = cells as f64;
        let ramp = |d: usize| -> f64 {
            if d < cells {
                let x = (w - d as f64) / w;
                rate * x * x
            } else {
                0.0
            }
        };
        for j in 0..self.ny {
            for i in 0..self.nx {
                let mut s: f64 = 0.0;
                if self.edges.x == EdgeKind::Outflow {
                    s = s.max(ramp(i)).max(ramp(self.nx - 1 - i));
                }
                if self.edges.y == EdgeKind::Outflow {
                    s = s.max(ramp(j)).max(ramp(self.ny - 1 - j));
                }
                let c = self.idx(i, j);
                self.sponge[c] = s;
            }
        }
    }

    /// Identity used to compare grids for artifact compatibility.
    pub fn same_layout(&self, other: &Grid) -> bool {
        self.nx == other.nx
            && self.ny == other.ny
            && self.dx == other.dx
            && self.dy == other.dy
            && self.bathymetry == other.bathymetry
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_or_degenerate_grids() {
        assert!(Grid::planar(4, 8, 1.0, 1.0, 10.0).is_err());
        assert!(Grid::planar(8, 8, 0.0, 1.0, 10.0).is_err());
        let mut g = Grid::planar(8, 8, 1.0, 1.0, 10.0).unwrap();
        g.bathymetry[3] = f64::NAN;
        assert!(g.validate().is_err());
    }

    #[test]
    fn locate_round_trips_cell_centres() {
        let g = Grid::geographic(40, 30, (160.0, 190.0), (-35.0, -5.0), 4000.0).unwrap();
        for (i, j) in [(0, 0), (17, 11), (39, 29)] {
            let (lon, lat) = g.cell_center(i, j);
            assert_eq!(g.locate(lon, lat), Some((i, j)));
            let (x, y) = g.metric_offset(i, j, lon, lat);
            assert!(x.abs() < 1e-6 && y.abs() < 1e-6);
        }
        assert_eq!(g.locate(159.0, -20.0), None);
        assert_eq!(g.locate(175.0, -4.0), None);
    }

    #[test]
    fn sponge_only_on_outflow_edges() {
        let mut g = Grid::planar(16, 16, 1.0, 1.0, 10.0).unwrap();
        g.edges = Edges {
            x: EdgeKind::Outflow,
            y: EdgeKind::Wall,
        };
        g.set_sponge(4, 1e-3);
        assert_eq!(g.sponge[g.idx(0, 8)], 1e-3);
        assert_eq!(g.sponge[g.idx(8, 0)], 0.0);
        assert_eq!(g.sponge[g.idx(8, 8)], 0.0);
        assert!(g.sponge[g.idx(14, 8)] > 0.0);
    }
}
