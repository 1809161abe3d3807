// SPDX-License-Identifier: MIT OR Apache-2.0

//! Maximum-likelihood and Bayesian inference for the two-phase continuous
//! piecewise linear regression model
//!
//! ```text
//! x_i = gamma * (t_i - u) * 1{t_i <= u} + noise_i,   noise_i ~ N(0, sigma2)
//! ```
//!
//! with an unknown breakpoint `u`, together with a Monte Carlo harness that
//! checks the large-sample behaviour of the estimators.

pub mod cli;
pub mod dist;
pub mod error;
pub mod estimate;
pub mod fisher;
pub mod model;
pub mod posterior;
pub mod pseudo;
pub mod quad;
pub mod simulate;

pub use error::{Error, Result};
pub use estimate::{fit_mle, fit_mle_bruteforce, profile_fit_at, FitFlag, FitResult, ProfilePoint};
pub use fisher::{
    asymptotic_information, empirical_information, wald_interval, InfoMatrix, InfoSource, Interval,
};
pub use model::{Dataset, Design, Domain, LimitDesign, Theta};
pub use posterior::{
    bayes_estimator, bvm_l1_u, sample_posterior, u_marginal_log_posterior, NigPrior,
    PosteriorSummary, Prior, UPosteriorGrid, UPrior,
};
pub use pseudo::{fit_pseudo, mle_gap, pseudo_delete, PseudoDataset, PseudoFit, WindowRule};
pub use simulate::{run_study, Scenario, StudyReport};
