use serde::{Deserialize, Serialize};

use super::grid::{EdgeKind, Edges, Grid};
use crate::error::{Error, Result};

/// Simulation configuration, normally read from a TOML file with the
/// sections `[grid]`, `[bathymetry]`, `[ic]`, `[physics]`, `[run]` and
/// `[boundaries]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub grid: GridConfig,
    #[serde(default)]
    pub bathymetry: BathymetryConfig,
    pub ic: IcConfig,
    #[serde(default)]
    pub physics: PhysicsConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub boundaries: BoundaryConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    /// Degrees converted to metres at the central latitude.
    #[default]
    Geographic,
    /// Explicit metric spacing `dx_m`, `dy_m`; lon/lat extents only anchor the origin.
    Planar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
    #[serde(default)]
    pub spacing: Spacing,
    #[serde(default)]
    pub dx_m: Option<f64>,
    #[serde(default)]
    pub dy_m: Option<f64>,
}

/// Gaussian seamount/island added to a flat basin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Island {
    pub lon: f64,
    pub lat: f64,
    pub radius_km: f64,
    /// Peak elevation above the rest surface (m).
    pub peak: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathymetryConfig {
    /// Basin depth (m, positive).
    pub depth: f64,
    /// Ocean cells are kept at least this deep (m).
    #[serde(default = "default_min_depth")]
    pub min_depth: f64,
    #[serde(default)]
    pub islands: Vec<Island>,
}

fn default_min_depth() -> f64 {
    50.0
}

impl Default for BathymetryConfig {
    fn default() -> Self {
        BathymetryConfig {
            depth: 4000.0,
            min_depth: default_min_depth(),
            islands: Vec::new(),
        }
    }
}

/// Gaussian sea-surface uplift: `eta = mag * amplitude * exp(-r^2 / 2 sigma^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcConfig {
    pub lon0: f64,
    pub lat0: f64,
    pub mag: f64,
    #[serde(default = "default_sigma_km")]
    pub sigma_km: f64,
    /// Uplift per unit magnitude factor (m).
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_sigma_km() -> f64 {
    120.0
}

fn default_amplitude() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CoriolisMode {
    None,
    Constant,
    #[default]
    Latitude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsConfig {
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    #[serde(default)]
    pub coriolis: CoriolisMode,
    /// Constant Coriolis parameter when `coriolis = "constant"`.
    #[serde(default)]
    pub f0: f64,
    #[serde(default)]
    pub drag: f64,
    #[serde(default = "default_h_min")]
    pub h_min: f64,
}

fn default_gravity() -> f64 {
    9.81
}

fn default_h_min() -> f64 {
    1e-6
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            gravity: default_gravity(),
            coriolis: CoriolisMode::default(),
            f0: 0.0,
            drag: 0.0,
            h_min: default_h_min(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Total simulated time (s).
    pub duration: f64,
    /// Interval between recorded frames (s).
    pub cadence: f64,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
}

fn default_cfl() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConfig {
    #[serde(default = "default_edge")]
    pub x: EdgeKind,
    #[serde(default = "default_edge")]
    pub y: EdgeKind,
    #[serde(default)]
    pub sponge_cells: usize,
    /// Relaxation rate at the outermost sponge cell (1/s).
    #[serde(default)]
    pub sponge_rate: f64,
}

fn default_edge() -> EdgeKind {
    EdgeKind::Wall
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig {
            x: EdgeKind::Wall,
            y: EdgeKind::Wall,
            sponge_cells: 0,
            sponge_rate: 0.0,
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<SimConfig> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("SimConfig serialises")
    }

    /// Build the grid (bathymetry, rotation, boundaries) described by this config.
    pub fn build_grid(&self) -> Result<Grid> {
        let gc = &self.grid;
        let b = &self.bathymetry;
        if !(b.depth > 0.0) {
            return Err(Error::config("bathymetry depth must be positive"));
        }
        let mut grid = match gc.spacing {
            Spacing::Geographic => Grid::geographic(
                gc.nx,
                gc.ny,
                (gc.lon_min, gc.lon_max),
                (gc.lat_min, gc.lat_max),
                b.depth,
            )?,
            Spacing::Planar => {
                let (dx, dy) = match (gc.dx_m, gc.dy_m) {
                    (Some(dx), Some(dy)) => (dx, dy),
                    _ => return Err(Error::config("planar spacing requires dx_m and dy_m")),
                };
                let mut g = Grid::planar(gc.nx, gc.ny, dx, dy, b.depth)?;
                g.lon_min = gc.lon_min;
                g.lat_min = gc.lat_min;
                g.dlon = (gc.lon_max - gc.lon_min) / gc.nx as f64;
                g.dlat = (gc.lat_max - gc.lat_min) / gc.ny as f64;
                if !(g.dlon > 0.0 && g.dlat > 0.0) {
                    return Err(Error::config("grid extents must be increasing"));
                }
                g
            }
        };

        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let mut z = -b.depth;
                for isl in &b.islands {
                    let (x, y) = grid.metric_offset(i, j, isl.lon, isl.lat);
                    let r = isl.radius_km * 1e3;
                    z += (b.depth + isl.peak) * (-(x * x + y * y) / (2.0 * r * r)).exp();
                }
                if z < 0.0 {
                    z = z.min(-b.min_depth);
                }
                let c = grid.idx(i, j);
                grid.bathymetry[c] = z;
            }
        }

        let p = &self.physics;
        grid.gravity = p.gravity;
        grid.drag = p.drag;
        grid.h_min = p.h_min;
        match p.coriolis {
            CoriolisMode::None => grid.coriolis.iter_mut().for_each(|f| *f = 0.0),
            CoriolisMode::Constant => grid.coriolis.iter_mut().for_each(|f| *f = p.f0),
            CoriolisMode::Latitude => grid.set_latitude_coriolis(),
        }
        let bc = &self.boundaries;
        grid.edges = Edges { x: bc.x, y: bc.y };
        grid.set_sponge(bc.sponge_cells, bc.sponge_rate);
        grid.validate()?;
        Ok(grid)
    }

    /// Number of recorded intervals; `duration` must be a whole multiple of `cadence`.
    pub fn frame_count(&self) -> Result<usize> {
        let r = &self.run;
        if !(r.duration >= 0.0 && r.duration.is_finite()) {
            return Err(Error::config("duration must be nonnegative"));
        }
        if r.duration == 0.0 {
            return Ok(0);
        }
        if !(r.cadence > 0.0 && r.cadence.is_finite()) {
            return Err(Error::config("cadence must be positive"));
        }
        let n = r.duration / r.cadence;
        let nr = n.round();
        if (n - nr).abs() > 1e-9 * n.max(1.0) || nr < 1.0 {
            return Err(Error::config(format!(
                "duration {} s is not a whole multiple of cadence {} s",
                r.duration, r.cadence
            )));
        }
        Ok(nr as usize)
    }

    /// A copy with the epicentre and magnitude shifted.
    pub fn perturbed(&self, dlon: f64, dlat: f64, dmag: f64) -> SimConfig {
        let mut c = self.clone();
        c.ic.lon0 += dlon;
        c.ic.lat0 += dlat;
        c.ic.mag += dmag;
        c
    }
}
