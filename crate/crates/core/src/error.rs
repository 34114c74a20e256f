use std::io;

use thiserror::Error;

/// Errors produced anywhere in the modeling chain.
///
/// Variants are grouped so that the command-line front end can map them onto
/// its exit codes: configuration problems, numerical failures and stale or
/// missing upstream artifacts.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("CFL condition violated: dt = {dt} s exceeds limit {limit} s (h_max = {h_max} m)")]
    Cfl { dt: f64, limit: f64, h_max: f64 },

    #[error("integration error: non-finite value in field `{field}` at step {step}")]
    Integration { field: &'static str, step: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("truncation target unattainable: requested RIC {requested}, maximum achievable {max}")]
    Unattainable { requested: f64, max: f64 },

    #[error("training failed after {iterations} iterations: final loss {final_loss}, gradient norm {grad_norm}")]
    Training {
        iterations: usize,
        final_loss: f64,
        grad_norm: f64,
    },

    #[error("sensor placement failed: {0}")]
    Placement(String),

    #[error("MCMC initialization failed: {0}")]
    Initialization(String),

    #[error("diagnostic unavailable: {0}")]
    Diagnostic(String),

    #[error("provenance error: {message} (rerun stage `{stage}`)")]
    Provenance { stage: String, message: String },

    #[error("file format error: {0}")]
    Format(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
