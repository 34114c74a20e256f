//! Reduced-order tsunami forecasting: shallow-water snapshots, proper
//! orthogonal decomposition, Galerkin-projection ROMs with learned Hadamard
//! corrections, and hierarchical Bayesian calibration of ROM initial values.

mod binio;
pub mod calib;
pub mod error;
pub mod galerkin;
pub mod ngp;
pub mod pipeline;
pub mod pod;
pub mod sensors;
pub mod swe_sim;

pub use binio::{hex_digest, sha256};
pub use error::{Error, Result};
