// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

/// Errors raised by the estimation, posterior and study routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("log-likelihood is not differentiable at u = {u}: it coincides with an observed temperature")]
    NonDifferentiable { u: f64 },

    #[error("singular information: {0}")]
    SingularInformation(String),

    #[error(
        "quadrature did not converge: achieved error {achieved:.3e}, requested {requested:.3e}"
    )]
    Quadrature { achieved: f64, requested: f64 },

    #[error("every observation fell inside the deletion window ({lower}, {upper})")]
    EmptyPseudoDataset { lower: f64, upper: f64 },

    #[error("infinite moment: the posterior mean of sigma^2 needs inverse-gamma shape a0 > 1, got a0 = {a0}")]
    InfiniteMoment { a0: f64 },

    #[error("u-grid [{grid_lower}, {grid_upper}] does not cover the required range [{needed_lower}, {needed_upper}]; widen the grid")]
    GridCoverage {
        grid_lower: f64,
        grid_upper: f64,
        needed_lower: f64,
        needed_upper: f64,
    },

    #[error("random-walk sampler accepted no proposal during the adaptation window; reduce the step sizes")]
    StepSize,

    #[error("fit is flagged ({0}); refusing to use it")]
    FlaggedFit(String),

    #[error("{path}:{line}: {message}")]
    Csv {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn precondition(msg: impl Into<String>) -> Error {
    Error::Precondition(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
