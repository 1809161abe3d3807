// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fisher information (asymptotic and empirical) and Wald intervals.
//!
//! Parameter order is `(gamma, u, sigma2)` throughout.

use serde::{Deserialize, Serialize};

use crate::dist::normal_quantile;
use crate::error::{invalid, precondition, Error, Result};
use crate::estimate::FitResult;
use crate::model::{Dataset, Design, LimitDesign, Theta};

/// Relative pivot floor; beyond it an inverse keeps fewer than half the digits.
pub const PIVOT_RTOL: f64 = 1e-8;

/// Symmetric 3×3 information matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InfoMatrix([[f64; 3]; 3]);

impl InfoMatrix {
    /// Builds a symmetric matrix from its upper triangle (lower entries ignored).
    pub fn from_upper(m: [[f64; 3]; 3]) -> Self {
        let mut s = m;
        for i in 0..3 {
            for j in 0..i {
                s[i][j] = m[j][i];
            }
        }
        Self(s)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[i][j]
    }

    pub fn as_array(&self) -> &[[f64; 3]; 3] {
        &self.0
    }

    pub fn into_array(self) -> [[f64; 3]; 3] {
        self.0
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut m = self.0;
        m.iter_mut().flatten().for_each(|v| *v *= c);
        Self(m)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..3).all(|i| (0..3).all(|j| (self.0[i][j] - self.0[j][i]).abs() <= tol))
    }

    /// Leading principal minors `(Δ1, Δ2, Δ3)`.
    pub fn leading_minors(&self) -> [f64; 3] {
        let m = &self.0;
        let d1 = m[0][0];
        let d2 = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let d3 = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        [d1, d2, d3]
    }

    /// Lower-triangular Cholesky factor. Pivots below [`PIVOT_RTOL`] of
    /// their diagonal entry count as singular.
    pub fn cholesky(&self) -> Result<[[f64; 3]; 3]> {
        let a = &self.0;
        let mut l = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..=i {
                let partial: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                if i == j {
                    let d = a[i][i] - partial;
                    if !(d > PIVOT_RTOL * a[i][i]) || !d.is_finite() {
                        return Err(Error::SingularInformation(format!(
                            "matrix is not positive definite (pivot {i} = {d:e})"
                        )));
                    }
                    l[i][i] = d.sqrt();
                } else {
                    l[i][j] = (a[i][j] - partial) / l[j][j];
                }
            }
        }
        Ok(l)
    }

    pub fn is_positive_definite(&self) -> bool {
        self.cholesky().is_ok()
    }

    /// Inverse via Cholesky.
    pub fn inverse(&self) -> Result<Self> {
        let l = self.cholesky()?;
        // Invert L (lower triangular), then A^{-1} = L^{-T} L^{-1}.
        let mut li = [[0.0; 3]; 3];
        for i in 0..3 {
            li[i][i] = 1.0 / l[i][i];
            for j in 0..i {
                let s: f64 = (j..i).map(|k| l[i][k] * li[k][j]).sum();
                li[i][j] = -s / l[i][i];
            }
        }
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = (i.max(j)..3).map(|k| li[k][i] * li[k][j]).sum();
            }
        }
        Ok(Self(inv))
    }

    pub fn mul(&self, other: &Self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        out
    }
}

fn check_identifiable(theta: &Theta) -> Result<()> {
    if !(theta.sigma2 > 0.0 && theta.sigma2.is_finite()) {
        return Err(precondition(format!(
            "sigma2 must be positive, got {}",
            theta.sigma2
        )));
    }
    if theta.gamma == 0.0 || !theta.gamma.is_finite() {
        return Err(precondition("gamma must be finite and non-zero"));
    }
    Ok(())
}

fn assemble(theta: &Theta, k0: f64, k1: f64, k2: f64) -> InfoMatrix {
    let (g, s2) = (theta.gamma, theta.sigma2);
    InfoMatrix::from_upper([
        [k2 / s2, -g * k1 / s2, 0.0],
        [0.0, g * g * k0 / s2, 0.0],
        [0.0, 0.0, 0.5 / (s2 * s2)],
    ])
}

/// Limiting information `I(theta)` under the temperature distribution `design`.
///
/// The non-zero entries are the moments `∫_{lower}^{u} (t - u)^k dF(t)` for
/// `k = 0, 1, 2`; the noise-variance coordinate decouples.
pub fn asymptotic_information<D: Design>(theta: &Theta, design: &D) -> Result<InfoMatrix> {
    check_identifiable(theta)?;
    let domain = design.domain();
    if !domain.interior(theta.u) {
        return Err(precondition(format!(
            "breakpoint {} outside the open domain",
            theta.u
        )));
    }
    let u = theta.u;
    let k0 = design.integrate_below(|_| 1.0, u, &[])?;
    let k1 = design.integrate_below(|t| t - u, u, &[])?;
    let k2 = design.integrate_below(|t| (t - u) * (t - u), u, &[])?;
    Ok(assemble(theta, k0, k1, k2))
}

/// Empirical analogue of [`asymptotic_information`] with the moments
/// replaced by averages over the observed temperatures with `t_i <= u`.
pub fn empirical_information(theta: &Theta, data: &Dataset) -> Result<InfoMatrix> {
    check_identifiable(theta)?;
    let u = theta.u;
    let m = data.active_count(u);
    if m == 0 {
        return Err(Error::SingularInformation(format!(
            "no observation satisfies t <= u = {u}"
        )));
    }
    let n = data.len() as f64;
    let (k1, k2) = data.t()[..m].iter().fold((0.0, 0.0), |(a, b), &t| {
        let z = t - u;
        (a + z, b + z * z)
    });
    Ok(assemble(theta, m as f64 / n, k1 / n, k2 / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.upper - self.lower)
    }
}

/// Where the information matrix for a Wald interval comes from.
#[derive(Clone, Copy, Debug)]
pub enum InfoSource<'a> {
    /// Empirical information at the estimate (the default).
    Empirical(&'a Dataset),
    /// Limiting information at the estimate under a known design.
    Design(&'a LimitDesign),
    /// A precomputed matrix.
    Given(&'a InfoMatrix),
}

/// Per-coordinate Wald intervals `theta_k ± z * sqrt([I^{-1}]_kk / n)`.
pub fn wald_interval(fit: &FitResult, source: InfoSource<'_>, level: f64) -> Result<[Interval; 3]> {
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    fit.require_clean()?;
    let info = match source {
        InfoSource::Empirical(data) => empirical_information(&fit.theta_hat, data)?,
        InfoSource::Design(design) => asymptotic_information(&fit.theta_hat, design)?,
        InfoSource::Given(m) => *m,
    };
    let inv = info.inverse()?;
    let z = normal_quantile(0.5 * (1.0 + level));
    let n = fit.n as f64;
    let est = fit.theta_hat.to_array();
    Ok(std::array::from_fn(|k| {
        let half = z * (inv.get(k, k) / n).sqrt();
        Interval {
            lower: est[k] - half,
            upper: est[k] + half,
        }
    }))
}
