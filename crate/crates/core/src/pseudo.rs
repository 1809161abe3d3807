// SPDX-License-Identifier: MIT OR Apache-2.0

//! The pseudo-problem: observations in a shrinking open window around the
//! true breakpoint are deleted, which makes the likelihood smooth near the
//! optimum.
//!
//! Everything here takes the true `u0` and is therefore only usable in
//! simulation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimate::{fit_mle, FitResult};
use crate::model::{Dataset, Domain};

/// Width `d_n` of the deletion window as a function of `n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WindowRule {
    /// `d_n = scale * n^(-alpha)`, `0 < alpha < 1/2`.
    Power {
        alpha: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    /// `d_n = scale / ln n`.
    LogInv {
        #[serde(default = "one")]
        scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Default for WindowRule {
    fn default() -> Self {
        WindowRule::Power {
            alpha: 0.25,
            scale: 1.0,
        }
    }
}

impl WindowRule {
    pub fn power(alpha: f64) -> Result<Self> {
        let r = WindowRule::Power { alpha, scale: 1.0 };
        r.check()?;
        Ok(r)
    }

    pub fn log_inv() -> Self {
        WindowRule::LogInv { scale: 1.0 }
    }

    /// Both `d_n -> 0` and `(ln n) / (sqrt(n) d_n) -> 0` must hold. The
    /// power rule needs `alpha < 1/2` for the second; `alpha > 0` for the first.
    pub fn check(&self) -> Result<()> {
        let scale = match *self {
            WindowRule::Power { alpha, scale } => {
                if !(alpha > 0.0 && alpha < 0.5) {
                    return Err(invalid(format!(
                        "power window needs 0 < alpha < 1/2, got {alpha}"
                    )));
                }
                scale
            }
            WindowRule::LogInv { scale } => scale,
        };
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(invalid(format!(
                "window scale must be positive, got {scale}"
            )));
        }
        Ok(())
    }

    /// Window width for sample size `n` (infinite for `n <= 1` under `LogInv`).
    pub fn width(&self, n: usize) -> f64 {
        let n = n as f64;
        match *self {
            WindowRule::Power { alpha, scale } => scale * n.powf(-alpha),
            WindowRule::LogInv { scale } => scale / n.ln(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoDataset {
    pub kept: Dataset,
    pub deleted_count: usize,
    /// Open window `(u0 - d_n/2, u0 + d_n/2)`.
    pub window: (f64, f64),
}

impl PseudoDataset {
    pub fn kept_count(&self) -> usize {
        self.kept.len()
    }

    pub fn original_count(&self) -> usize {
        self.kept.len() + self.deleted_count
    }

    pub fn deleted_fraction(&self) -> f64 {
        self.deleted_count as f64 / self.original_count() as f64
    }
}

/// Deletes the observations whose temperature lies strictly inside the
/// window of width `rule.width(n)` centred at `u0`.
pub fn pseudo_delete(data: &Dataset, u0: f64, rule: &WindowRule) -> Result<PseudoDataset> {
    rule.check()?;
    if !u0.is_finite() {
        return Err(invalid("u0 must be finite"));
    }
    let half = 0.5 * rule.width(data.len());
    let (lo, hi) = (u0 - half, u0 + half);
    delete_window(data, lo, hi)
}

fn delete_window(data: &Dataset, lo: f64, hi: f64) -> Result<PseudoDataset> {
    let kept = data
        .filtered(|t| !(t > lo && t < hi))
        .ok_or(Error::EmptyPseudoDataset {
            lower: lo,
            upper: hi,
        })?;
    Ok(PseudoDataset {
        deleted_count: data.len() - kept.len(),
        kept,
        window: (lo, hi),
    })
}

impl PseudoDataset {
    /// Applies the same window again (a no-op on the kept set).
    pub fn redelete(&self) -> Result<PseudoDataset> {
        let again = delete_window(&self.kept, self.window.0, self.window.1)?;
        Ok(PseudoDataset {
            deleted_count: self.deleted_count + again.deleted_count,
            ..again
        })
    }
}

/// MLE of the pseudo-problem, with the deletion counts `n*` and `n**`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoFit {
    pub fit: FitResult,
    /// `n*`.
    pub kept_count: usize,
    /// `n**`.
    pub deleted_count: usize,
    pub window: (f64, f64),
}

pub fn fit_pseudo(
    data: &Dataset,
    u0: f64,
    rule: &WindowRule,
    domain: &Domain,
) -> Result<PseudoFit> {
    if !domain.contains(u0) {
        return Err(invalid(format!("u0 = {u0} outside the domain")));
    }
    let pseudo = pseudo_delete(data, u0, rule)?;
    let fit = fit_mle(&pseudo.kept, domain)?;
    Ok(PseudoFit {
        fit,
        kept_count: pseudo.kept.len(),
        deleted_count: pseudo.deleted_count,
        window: pseudo.window,
    })
}

/// `sqrt(n) (theta_hat - theta_hat*)`.
pub fn mle_gap(full: &FitResult, pseudo: &FitResult, n: usize) -> Result<[f64; 3]> {
    full.require_clean()?;
    pseudo.require_clean()?;
    let a = full.theta_hat.to_array();
    let b = pseudo.theta_hat.to_array();
    let root_n = (n as f64).sqrt();
    Ok(std::array::from_fn(|k| root_n * (a[k] - b[k])))
}
