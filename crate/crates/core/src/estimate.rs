// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exact maximum-likelihood estimation.
//!
//! For a fixed breakpoint the model is linear in `gamma`, so the likelihood
//! profiles down to the residual sum of squares
//! `rss(u) = Σx² - S1(u)² / S2(u)` with `S1 = Σ_A (t - u) x` and
//! `S2 = Σ_A (t - u)²` over the active set `A(u) = {i : t_i <= u}`. Between
//! consecutive distinct temperatures the active set is fixed and `rss` is a
//! rational function of `u` whose stationary point has a closed form, so the
//! global optimum is found by enumerating a handful of candidates per
//! segment.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, precondition, Error, Result};
use crate::fisher::{empirical_information, InfoMatrix};
use crate::model::{Dataset, Domain, Theta};

/// Relative distance of the boundary candidates from the domain edges.
pub const BOUNDARY_EPS: f64 = 1e-12;

// rss below this fraction of Σx² is reported as an exact fit.
const EXACT_FIT_REL: f64 = 1e-20;

// Candidates within this fraction of Σx² are ties; the smaller u wins.
const TIE_REL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFlag {
    DegenerateGammaZero,
    Sigma2Zero,
    BreakpointAtBoundary,
    EmptyActiveSet,
}

impl fmt::Display for FitFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::DegenerateGammaZero => "degenerate_gamma_zero",
            Self::Sigma2Zero => "sigma2_zero",
            Self::BreakpointAtBoundary => "breakpoint_at_boundary",
            Self::EmptyActiveSet => "empty_active_set",
        };
        f.write_str(s)
    }
}

/// Output of [`fit_mle`] and [`fit_mle_bruteforce`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: Theta,
    pub rss: f64,
    /// Maximised log-likelihood; `+inf` for an exact fit.
    pub loglik: f64,
    pub n: usize,
    pub active_count: usize,
    /// `I(theta_hat)^{-1} / n` from the empirical information; absent for flagged fits.
    pub cov_hat: Option<[[f64; 3]; 3]>,
    pub flags: BTreeSet<FitFlag>,
}

impl FitResult {
    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }

    pub fn require_clean(&self) -> Result<()> {
        if self.is_flagged() {
            let names: Vec<String> = self.flags.iter().map(ToString::to_string).collect();
            return Err(Error::FlaggedFit(names.join(", ")));
        }
        Ok(())
    }
}

/// Profile of the likelihood at a fixed breakpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub u: f64,
    /// Least-squares slope; absent when the active set carries no information.
    pub gamma_hat: Option<f64>,
    pub rss: f64,
    pub active_count: usize,
}

/// Least-squares fit of `gamma` with the breakpoint held at `u`.
pub fn profile_fit_at(u: f64, data: &Dataset, domain: &Domain) -> Result<ProfilePoint> {
    if !domain.contains(u) {
        return Err(precondition(format!(
            "breakpoint {u} outside the domain [{}, {}]",
            domain.lower, domain.upper
        )));
    }
    Ok(profile_unchecked(u, data))
}

fn profile_unchecked(u: f64, data: &Dataset) -> ProfilePoint {
    let m = data.active_count(u);
    let (t, x) = (&data.t()[..m], &data.x()[..m]);
    let (s1, s2) = t.iter().zip(x).fold((0.0, 0.0), |(s1, s2), (&ti, &xi)| {
        let z = ti - u;
        (s1 + z * xi, s2 + z * z)
    });
    let gamma_hat = (s2 > 0.0).then(|| s1 / s2);
    let g = gamma_hat.unwrap_or(0.0);
    let active_rss: f64 = t
        .iter()
        .zip(x)
        .map(|(&ti, &xi)| {
            let r = xi - g * (ti - u);
            r * r
        })
        .sum();
    let inactive_rss: f64 = data.x()[m..].iter().map(|v| v * v).sum();
    ProfilePoint {
        u,
        gamma_hat,
        rss: active_rss + inactive_rss,
        active_count: m,
    }
}

// Running centred moments of the active set in shifted coordinates.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Moments {
    m: f64,
    mean_s: f64,
    m2: f64, // Σ (s - s̄)²
    co: f64, // Σ (s - s̄) x
    sum_x: f64,
}

impl Moments {
    pub(crate) fn push(&mut self, s: f64, x: f64) {
        self.m += 1.0;
        let delta = s - self.mean_s;
        self.mean_s += delta / self.m;
        self.m2 += delta * (s - self.mean_s);
        // Σ(s - s̄)x updates like a co-moment with x's mean folded into sum_x.
        self.co += (s - self.mean_s) * x - delta / self.m * self.sum_x;
        self.sum_x += x;
    }

    /// `(S1, S2) = (Σ (s - v) x, Σ (s - v)²)` over the accumulated points.
    pub(crate) fn sums(&self, v: f64) -> (f64, f64) {
        if self.m == 0.0 {
            return (0.0, 0.0);
        }
        let w = self.mean_s - v;
        (self.co + w * self.sum_x, self.m2 + self.m * w * w)
    }

    /// `S1²/S2` at shifted breakpoint `v`; zero when `S2` vanishes.
    fn gain(&self, v: f64) -> f64 {
        let (s1, s2) = self.sums(v);
        if s2 > 0.0 {
            s1 * s1 / s2
        } else {
            0.0
        }
    }

    /// Stationary point of the gain in shifted coordinates. The `u²` terms
    /// of the first-order condition cancel, leaving a linear equation.
    fn stationary(&self) -> Option<f64> {
        if self.m == 0.0 || self.co == 0.0 {
            return None;
        }
        let w = self.sum_x * self.m2 / (self.m * self.co);
        let v = self.mean_s - w;
        v.is_finite().then_some(v)
    }
}

/// Exact global MLE by segment-wise enumeration of the profile likelihood.
pub fn fit_mle(data: &Dataset, domain: &Domain) -> Result<FitResult> {
    check_fit_input(data, domain)?;
    let eps = BOUNDARY_EPS * domain.width();
    let (lo_edge, hi_edge) = (domain.lower + eps, domain.upper - eps);
    let total = data.sum_sq_x();
    let tie = TIE_REL * total;

    let t = data.t();
    let x = data.x();
    let n = t.len();

    // Best candidate so far: (gain, u). Larger gain = smaller rss.
    let mut best: Option<(f64, f64)> = None;
    let mut consider = |gain: f64, u: f64| match best {
        Some((g, _)) if gain <= g + tie => {}
        _ => best = Some((gain, u)),
    };

    let mut moments = Moments::default();
    // The segment left of the first temperature has an empty active set.
    consider(0.0, lo_edge);

    let mut i = 0;
    while i < n {
        let tau = t[i];
        while i < n && t[i] == tau {
            moments.push(t[i] - domain.lower, x[i]);
            i += 1;
        }
        let seg_lo = tau.max(lo_edge);
        let seg_hi = if i < n { t[i].min(hi_edge) } else { hi_edge };
        if seg_lo > seg_hi {
            continue;
        }
        let mut cands = [Some(seg_lo), None, Some(seg_hi)];
        if let Some(v) = moments.stationary() {
            let u = v + domain.lower;
            if u > seg_lo && u < seg_hi {
                cands[1] = Some(u);
            }
        }
        for u in cands.into_iter().flatten() {
            consider(moments.gain(u - domain.lower), u);
        }
    }

    let (best_gain, u_best) = best.expect("at least one candidate");
    finish(data, domain, u_best, best_gain <= tie)
}

/// Grid-search MLE over the supplied breakpoint candidates.
pub fn fit_mle_bruteforce(data: &Dataset, u_grid: &[f64], domain: &Domain) -> Result<FitResult> {
    check_fit_input(data, domain)?;
    if u_grid.is_empty() {
        return Err(invalid("breakpoint grid is empty"));
    }
    if let Some(&u) = u_grid.iter().find(|&&u| !domain.contains(u)) {
        return Err(precondition(format!("grid point {u} outside the domain")));
    }
    let total = data.sum_sq_x();
    let mut best: Option<ProfilePoint> = None;
    for &u in u_grid {
        let p = profile_unchecked(u, data);
        let better = match &best {
            None => true,
            Some(b) => p.rss < b.rss || (p.rss == b.rss && p.u < b.u),
        };
        if better {
            best = Some(p);
        }
    }
    let best = best.expect("non-empty grid");
    let degenerate = best.rss >= total * (1.0 - TIE_REL);
    finish(data, domain, best.u, degenerate)
}

fn check_fit_input(data: &Dataset, domain: &Domain) -> Result<()> {
    if data.len() < 3 {
        return Err(precondition(format!(
            "need at least 3 observations, got {}",
            data.len()
        )));
    }
    data.check_domain(domain)
}

fn finish(data: &Dataset, domain: &Domain, u: f64, degenerate: bool) -> Result<FitResult> {
    let n = data.len();
    let total = data.sum_sq_x();
    let eps = BOUNDARY_EPS * domain.width();
    let mut flags = BTreeSet::new();

    let (u, gamma, rss) = if degenerate {
        flags.insert(FitFlag::DegenerateGammaZero);
        (domain.midpoint(), 0.0, total)
    } else {
        let p = profile_unchecked(u, data);
        match p.gamma_hat {
            Some(g) if g != 0.0 => (u, g, p.rss),
            _ => {
                flags.insert(FitFlag::DegenerateGammaZero);
                (domain.midpoint(), 0.0, total)
            }
        }
    };
    let active_count = data.active_count(u);
    if active_count == 0 {
        flags.insert(FitFlag::EmptyActiveSet);
    }
    if u <= domain.lower + eps || u >= domain.upper - eps {
        flags.insert(FitFlag::BreakpointAtBoundary);
    }
    let rss = if rss <= EXACT_FIT_REL * total {
        flags.insert(FitFlag::Sigma2Zero);
        0.0
    } else {
        rss
    };

    let nf = n as f64;
    let sigma2 = rss / nf;
    let loglik = if rss > 0.0 {
        -0.5 * nf * (2.0 * std::f64::consts::PI * sigma2).ln() - 0.5 * nf
    } else {
        f64::INFINITY
    };
    let theta_hat = Theta::new(gamma, u, sigma2);
    let cov_hat = if flags.is_empty() {
        empirical_information(&theta_hat, data)
            .and_then(|info| info.inverse())
            .ok()
            .map(|inv| inv.scaled(1.0 / nf).into_array())
    } else {
        None
    };
    Ok(FitResult {
        theta_hat,
        rss,
        loglik,
        n,
        active_count,
        cov_hat,
        flags,
    })
}

/// Gradient of the log-likelihood in `(gamma, u, sigma2)`.
pub fn score(theta: &Theta, data: &Dataset) -> Result<[f64; 3]> {
    check_off_knot(theta, data)?;
    let s2 = theta.sigma2;
    let (mut d_gamma, mut sum_r_active, mut rss) = (0.0, 0.0, 0.0);
    for (t, x) in data.iter() {
        let r = x - theta.mean(t);
        rss += r * r;
        if t < theta.u {
            d_gamma += (t - theta.u) * r;
            sum_r_active += r;
        }
    }
    let n = data.len() as f64;
    Ok([
        d_gamma / s2,
        -theta.gamma * sum_r_active / s2,
        -n / (2.0 * s2) + rss / (2.0 * s2 * s2),
    ])
}

/// Negated Hessian of the mean log-likelihood, `B(theta) / n`.
pub fn observed_information(theta: &Theta, data: &Dataset) -> Result<InfoMatrix> {
    check_off_knot(theta, data)?;
    let (g, u, s2) = (theta.gamma, theta.u, theta.sigma2);
    let mut sz2 = 0.0; // Σ_A z²
    let mut s_r_minus_gz = 0.0; // Σ_A (r - γz)
    let mut s_rz = 0.0; // Σ_A r z
    let mut m = 0.0; // |A|
    let mut s_r = 0.0; // Σ_A r
    let mut rss = 0.0;
    for (t, x) in data.iter() {
        let r = x - theta.mean(t);
        rss += r * r;
        if t < u {
            let z = t - u;
            sz2 += z * z;
            s_r_minus_gz += r - g * z;
            s_rz += r * z;
            s_r += r;
            m += 1.0;
        }
    }
    let n = data.len() as f64;
    let s4 = s2 * s2;
    let mut b = [[0.0; 3]; 3];
    b[0][0] = sz2 / (s2 * n);
    b[0][1] = s_r_minus_gz / (s2 * n);
    b[0][2] = s_rz / (s4 * n);
    b[1][1] = g * g * m / (s2 * n);
    b[1][2] = -g * s_r / (s4 * n);
    b[2][2] = -0.5 / s4 + rss / (s4 * s2 * n);
    Ok(InfoMatrix::from_upper(b))
}

fn check_off_knot(theta: &Theta, data: &Dataset) -> Result<()> {
    if !(theta.sigma2 > 0.0 && theta.sigma2.is_finite()) {
        return Err(precondition(format!(
            "sigma2 must be positive, got {}",
            theta.sigma2
        )));
    }
    if data.is_knot(theta.u) {
        return Err(Error::NonDifferentiable { u: theta.u });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::log_likelihood;

    fn noiseless3() -> Dataset {
        Dataset::new(vec![0.2, 0.5, 0.8], vec![-0.8, -0.2, 0.0]).unwrap()
    }

    #[test]
    fn profile_examples() {
        let d = noiseless3();
        let dom = Domain::unit();
        let p = profile_fit_at(0.6, &d, &dom).unwrap();
        assert!((p.gamma_hat.unwrap() - 2.0).abs() < 1e-12);
        assert!(p.rss < 1e-24);
        assert_eq!(p.active_count, 2);

        let p = profile_fit_at(0.1, &d, &dom).unwrap();
        assert_eq!(p.gamma_hat, None);
        assert!((p.rss - 0.68).abs() < 1e-15);
        assert_eq!(p.active_count, 0);

        let p = profile_fit_at(0.5, &d, &dom).unwrap();
        assert!((p.gamma_hat.unwrap() - 8.0 / 3.0).abs() < 1e-12);
        assert!((p.rss - 0.04).abs() < 1e-12);

        assert!(profile_fit_at(1.5, &d, &dom).is_err());
    }

    #[test]
    fn noiseless_exact_recovery() {
        let fit = fit_mle(&noiseless3(), &Domain::unit()).unwrap();
        assert!((fit.theta_hat.gamma - 2.0).abs() < 1e-12);
        assert!((fit.theta_hat.u - 0.6).abs() < 1e-12);
        assert_eq!(fit.theta_hat.sigma2, 0.0);
        assert_eq!(fit.rss, 0.0);
        assert!(fit.flags.contains(&FitFlag::Sigma2Zero));
        assert_eq!(fit.cov_hat, None);
        assert_eq!(fit.active_count, 2);
    }

    #[test]
    fn null_responses_are_degenerate() {
        let d = Dataset::new(vec![0.1, 0.4, 0.7, 0.9], vec![0.0; 4]).unwrap();
        let fit = fit_mle(&d, &Domain::unit()).unwrap();
        assert_eq!(fit.rss, 0.0);
        assert_eq!(fit.theta_hat.gamma, 0.0);
        assert_eq!(fit.theta_hat.u, 0.5);
        assert!(fit.flags.contains(&FitFlag::DegenerateGammaZero));
    }

    #[test]
    fn too_few_observations() {
        let d = Dataset::new(vec![0.1, 0.4], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            fit_mle(&d, &Domain::unit()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn bruteforce_examples() {
        let d = noiseless3();
        let dom = Domain::unit();
        let fit = fit_mle_bruteforce(&d, &[0.6], &dom).unwrap();
        assert!((fit.theta_hat.gamma - 2.0).abs() < 1e-12);
        assert_eq!(fit.theta_hat.u, 0.6);
        assert_eq!(fit.theta_hat.sigma2, 0.0);

        let coarse = fit_mle_bruteforce(&d, &[0.25, 0.5, 0.75], &dom).unwrap();
        let exact = fit_mle(&d, &dom).unwrap();
        assert!(coarse.rss >= exact.rss);
        assert!(fit_mle_bruteforce(&d, &[], &dom).is_err());
    }

    #[test]
    fn score_with_empty_active_set() {
        let d = noiseless3();
        let th = Theta::new(1.5, 0.1, 0.8);
        let s = score(&th, &d).unwrap();
        let sum_sq = d.sum_sq_x();
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 0.0);
        assert!((s[2] - (-3.0 / 1.6 + sum_sq / (2.0 * 0.64))).abs() < 1e-12);
    }

    #[test]
    fn score_refuses_knots() {
        let d = noiseless3();
        let th = Theta::new(1.5, 0.5, 0.8);
        assert!(matches!(
            score(&th, &d),
            Err(Error::NonDifferentiable { .. })
        ));
        assert!(observed_information(&th, &d).is_err());
    }

    #[test]
    fn score_matches_finite_differences() {
        let d = Dataset::new(
            vec![0.05, 0.15, 0.33, 0.41, 0.58, 0.62, 0.77, 0.93],
            vec![-0.9, -0.7, -0.25, -0.3, 0.05, -0.02, 0.1, -0.04],
        )
        .unwrap();
        let th = Theta::new(1.8, 0.47, 0.3);
        let s = score(&th, &d).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut p = th.to_array();
            let mut m = th.to_array();
            p[k] += h;
            m[k] -= h;
            let fd = (log_likelihood(&Theta::from_array(p), &d).unwrap()
                - log_likelihood(&Theta::from_array(m), &d).unwrap())
                / (2.0 * h);
            assert!(
                (fd - s[k]).abs() <= 1e-4 * s[k].abs().max(1.0),
                "k={k}: {fd} vs {}",
                s[k]
            );
        }
    }

    #[test]
    fn stationary_score_at_interior_mle() {
        let d = Dataset::new(
            vec![0.05, 0.15, 0.33, 0.41, 0.58, 0.62, 0.77, 0.93],
            vec![-0.9, -0.7, -0.25, -0.3, 0.05, -0.02, 0.1, -0.04],
        )
        .unwrap();
        let fit = fit_mle(&d, &Domain::unit()).unwrap();
        assert!(!d.is_knot(fit.theta_hat.u));
        let s = score(&fit.theta_hat, &d).unwrap();
        for c in s {
            assert!(c.abs() < 1e-6 * d.len() as f64, "{s:?}");
        }
    }
}
