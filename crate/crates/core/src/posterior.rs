// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exact posterior for priors of the form `pi(u) x NIG(gamma, sigma2)`.
//!
//! Conditional on the breakpoint the model is a one-regressor Gaussian
//! linear model, so `(gamma, sigma2) | u` is normal-inverse-gamma and the
//! marginal likelihood of `u` is available in closed form. The remaining
//! one-dimensional posterior of `u` is handled on a grid with trapezoidal
//! quadrature.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Open01};
use serde::{Deserialize, Serialize};

use crate::dist::{ln_gamma, normal_cdf, normal_pdf, normal_quantile};
use crate::error::{invalid, precondition, Error, Result};
use crate::estimate::{fit_mle, FitResult, Moments};
use crate::fisher::{empirical_information, InfoMatrix};
use crate::model::{log_likelihood, Dataset, Domain, Theta};

/// Nodes in the fine window of [`default_u_grid`].
pub const FINE_NODES: usize = 2001;
/// Nodes in the domain-wide coarse pass of [`default_u_grid`].
pub const COARSE_NODES: usize = 512;
/// Half-width of the fine window, in asymptotic standard deviations of `u`.
pub const FINE_HALF_WIDTH_SD: f64 = 10.0;
/// Half-width the grid must cover for [`bvm_l1_u`], in standard deviations.
pub const BVM_COVERAGE_SD: f64 = 6.0;

/// Prior density of the breakpoint on the open domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UPrior {
    Uniform,
    TruncatedNormal { loc: f64, scale: f64 },
}

/// Normal-inverse-gamma prior: `gamma | sigma2 ~ N(m0, sigma2 / k0)`,
/// `sigma2 ~ InvGamma(a0, b0)` (shape, rate).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NigPrior {
    pub m0: f64,
    pub k0: f64,
    pub a0: f64,
    pub b0: f64,
}

impl Default for NigPrior {
    fn default() -> Self {
        Self {
            m0: 0.0,
            k0: 0.01,
            a0: 2.1,
            b0: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prior {
    pub u_prior: UPrior,
    pub nig: NigPrior,
    pub domain: Domain,
    max_moment_order: u32,
}

impl Prior {
    pub fn new(u_prior: UPrior, nig: NigPrior, domain: Domain) -> Result<Self> {
        domain.check()?;
        let NigPrior { m0, k0, a0, b0 } = nig;
        if !m0.is_finite() {
            return Err(invalid(format!("m0 must be finite, got {m0}")));
        }
        for (name, v) in [("k0", k0), ("a0", a0), ("b0", b0)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        if let UPrior::TruncatedNormal { loc, scale } = u_prior {
            if !(loc.is_finite() && scale > 0.0 && scale.is_finite()) {
                return Err(invalid(format!(
                    "u prior needs finite loc and scale > 0, got ({loc}, {scale})"
                )));
            }
        }
        // E||theta||^k is finite iff E[sigma2^k] is, i.e. k < a0 (gamma needs
        // only k < 2 a0 and u is bounded).
        let max_moment_order = (a0.ceil() - 1.0).max(0.0) as u32;
        Ok(Self {
            u_prior,
            nig,
            domain,
            max_moment_order,
        })
    }

    /// Largest `k` for which `∫ ||theta||^k pi(theta) dtheta` is guaranteed finite.
    pub fn max_moment_order(&self) -> u32 {
        self.max_moment_order
    }

    /// Log prior density of `u`; `-inf` outside the open domain.
    pub fn log_prior_u(&self, u: f64) -> f64 {
        let d = self.domain;
        if !d.interior(u) {
            return f64::NEG_INFINITY;
        }
        match self.u_prior {
            UPrior::Uniform => -d.width().ln(),
            UPrior::TruncatedNormal { loc, scale } => {
                let z = normal_cdf((d.upper - loc) / scale) - normal_cdf((d.lower - loc) / scale);
                normal_pdf((u - loc) / scale).ln() - (scale * z).ln()
            }
        }
    }

    /// Log joint prior density at `theta` (in the `(gamma, u, sigma2)` parametrisation).
    pub fn log_density(&self, theta: &Theta) -> f64 {
        if !(theta.sigma2 > 0.0) {
            return f64::NEG_INFINITY;
        }
        let NigPrior { m0, k0, a0, b0 } = self.nig;
        let s2 = theta.sigma2;
        let dg = theta.gamma - m0;
        let log_normal = -0.5 * (2.0 * PI * s2 / k0).ln() - k0 * dg * dg / (2.0 * s2);
        let log_ig = a0 * b0.ln() - ln_gamma(a0) - (a0 + 1.0) * s2.ln() - b0 / s2;
        self.log_prior_u(theta.u) + log_normal + log_ig
    }
}

/// Normal-inverse-gamma posterior of `(gamma, sigma2)` at a fixed breakpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NigPosterior {
    pub m: f64,
    pub k: f64,
    pub a: f64,
    pub b: f64,
}

impl NigPosterior {
    pub fn mean_gamma(&self) -> f64 {
        self.m
    }

    /// `E[sigma2]`; infinite when `a <= 1`.
    pub fn mean_sigma2(&self) -> f64 {
        if self.a > 1.0 {
            self.b / (self.a - 1.0)
        } else {
            f64::INFINITY
        }
    }

    /// Marginal (Student-t) variance of gamma; infinite when `a <= 1`.
    pub fn var_gamma(&self) -> f64 {
        self.mean_sigma2() / self.k
    }

    pub fn var_sigma2(&self) -> f64 {
        if self.a > 2.0 {
            self.b * self.b / ((self.a - 1.0).powi(2) * (self.a - 2.0))
        } else {
            f64::INFINITY
        }
    }
}

/// Sufficient statistics of the data for every breakpoint value.
pub struct ConjugateModel<'a> {
    data: &'a Dataset,
    prior: &'a Prior,
    prefix: Vec<Moments>,
    sum_sq: f64,
}

impl<'a> ConjugateModel<'a> {
    pub fn new(data: &'a Dataset, prior: &'a Prior) -> Self {
        let lower = prior.domain.lower;
        let mut prefix = Vec::with_capacity(data.len() + 1);
        let mut acc = Moments::default();
        prefix.push(acc);
        for (t, x) in data.iter() {
            acc.push(t - lower, x);
            prefix.push(acc);
        }
        Self {
            data,
            prior,
            prefix,
            sum_sq: data.sum_sq_x(),
        }
    }

    /// Conditional NIG posterior at breakpoint `u`.
    pub fn conditional(&self, u: f64) -> NigPosterior {
        let NigPrior { m0, k0, a0, b0 } = self.prior.nig;
        let active = self.data.active_count(u);
        let (szx, szz) = self.prefix[active].sums(u - self.prior.domain.lower);
        let k = k0 + szz;
        let m = (k0 * m0 + szx) / k;
        let a = a0 + 0.5 * self.data.len() as f64;
        // Σx² + k0 m0² − k m², rearranged as rss(u) + shrinkage to avoid cancellation.
        let quad = if szz > 0.0 {
            let g_hat = szx / szz;
            let rss = (self.sum_sq - szx * g_hat).max(0.0);
            rss + k0 * szz / k * (g_hat - m0).powi(2)
        } else {
            self.sum_sq + k0 * m0 * m0 - k * m * m
        };
        NigPosterior {
            m,
            k,
            a,
            b: b0 + 0.5 * quad,
        }
    }

    /// Log marginal likelihood of the data given `u`, with `(gamma, sigma2)`
    /// integrated out.
    pub fn log_marginal(&self, u: f64) -> f64 {
        let NigPrior { k0, a0, b0, .. } = self.prior.nig;
        let post = self.conditional(u);
        let n = self.data.len() as f64;
        -0.5 * n * (2.0 * PI).ln() + 0.5 * (k0 / post.k).ln() + a0 * b0.ln() - post.a * post.b.ln()
            + ln_gamma(post.a)
            - ln_gamma(a0)
    }
}

/// Marginal posterior density of `u` tabulated on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UPosteriorGrid {
    pub u_nodes: Vec<f64>,
    /// Unnormalised log posterior at the nodes.
    pub log_weights: Vec<f64>,
    /// Density values normalised to unit trapezoidal mass (a single node
    /// carries unit point mass).
    pub weights: Vec<f64>,
    pub domain: Domain,
}

impl UPosteriorGrid {
    /// Normalises arbitrary log weights on strictly increasing nodes.
    pub fn from_log_weights(
        u_nodes: Vec<f64>,
        log_weights: Vec<f64>,
        domain: Domain,
    ) -> Result<Self> {
        check_nodes(&u_nodes, &domain)?;
        if log_weights.len() != u_nodes.len() {
            return Err(invalid("one log weight per node required"));
        }
        let max = log_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::InvalidInput(
                "posterior vanishes at every node".into(),
            ));
        }
        let mut weights: Vec<f64> = log_weights.iter().map(|&l| (l - max).exp()).collect();
        let mass = if weights.len() == 1 {
            weights[0]
        } else {
            trapezoid(&u_nodes, &weights)
        };
        weights.iter_mut().for_each(|w| *w /= mass);
        Ok(Self {
            u_nodes,
            log_weights,
            weights,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.u_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_nodes.is_empty()
    }

    pub fn is_point_mass(&self) -> bool {
        self.u_nodes.len() == 1
    }

    /// Posterior expectation of `h(u)`.
    pub fn expectation<F: Fn(f64) -> f64>(&self, h: F) -> f64 {
        if self.is_point_mass() {
            return h(self.u_nodes[0]);
        }
        let vals: Vec<f64> = self
            .u_nodes
            .iter()
            .zip(&self.weights)
            .map(|(&u, &w)| h(u) * w)
            .collect();
        trapezoid(&self.u_nodes, &vals)
    }

    /// Trapezoidal mass of the grid (1 up to rounding).
    pub fn total_mass(&self) -> f64 {
        if self.is_point_mass() {
            self.weights[0]
        } else {
            trapezoid(&self.u_nodes, &self.weights)
        }
    }

    /// Posterior probability of `(lo, hi)` under the piecewise-linear density.
    pub fn mass_between(&self, lo: f64, hi: f64) -> f64 {
        if self.is_point_mass() {
            let u = self.u_nodes[0];
            return if u > lo && u < hi { 1.0 } else { 0.0 };
        }
        self.cdf(hi) - self.cdf(lo)
    }

    /// CDF of the piecewise-linear interpolated density.
    pub fn cdf(&self, u: f64) -> f64 {
        let nodes = &self.u_nodes;
        if u <= nodes[0] {
            return 0.0;
        }
        if u >= nodes[nodes.len() - 1] {
            return 1.0;
        }
        let j = nodes.partition_point(|&v| v <= u) - 1;
        let full: f64 = (0..j)
            .map(|i| 0.5 * (self.weights[i] + self.weights[i + 1]) * (nodes[i + 1] - nodes[i]))
            .sum();
        let h = nodes[j + 1] - nodes[j];
        let x = u - nodes[j];
        let (f0, f1) = (self.weights[j], self.weights[j + 1]);
        full + f0 * x + (f1 - f0) * x * x / (2.0 * h)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["u", "log_weight", "weight"]).map_err(io)?;
        for ((u, lw), wt) in self
            .u_nodes
            .iter()
            .zip(&self.log_weights)
            .zip(&self.weights)
        {
            w.write_record([u.to_string(), lw.to_string(), wt.to_string()])
                .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    // Cumulative trapezoid masses at the nodes.
    fn cumulative(&self) -> Vec<f64> {
        let mut c = Vec::with_capacity(self.len());
        c.push(0.0);
        for i in 1..self.len() {
            let area = 0.5
                * (self.weights[i - 1] + self.weights[i])
                * (self.u_nodes[i] - self.u_nodes[i - 1]);
            c.push(c[i - 1] + area);
        }
        c
    }

    fn sample_u(&self, cumulative: &[f64], p: f64) -> f64 {
        if self.is_point_mass() {
            return self.u_nodes[0];
        }
        let total = cumulative[cumulative.len() - 1];
        let target = p * total;
        let j = cumulative
            .partition_point(|&c| c <= target)
            .clamp(1, cumulative.len() - 1)
            - 1;
        let r = target - cumulative[j];
        let h = self.u_nodes[j + 1] - self.u_nodes[j];
        let (f0, f1) = (self.weights[j], self.weights[j + 1]);
        // Solve f0 x + (f1 - f0) x² / (2h) = r for x in [0, h].
        let slope = (f1 - f0) / h;
        let disc = (f0 * f0 + 2.0 * slope * r).max(0.0);
        let denom = f0 + disc.sqrt();
        let x = if denom > 0.0 { 2.0 * r / denom } else { 0.0 };
        self.u_nodes[j] + x.clamp(0.0, h)
    }
}

fn check_nodes(nodes: &[f64], domain: &Domain) -> Result<()> {
    if nodes.is_empty() {
        return Err(invalid("u-grid is empty"));
    }
    if !nodes.windows(2).all(|w| w[0] < w[1]) {
        return Err(invalid("u-grid nodes must be strictly increasing"));
    }
    if let Some(&u) = nodes.iter().find(|&&u| !domain.interior(u)) {
        return Err(invalid(format!("u-grid node {u} outside the open domain")));
    }
    Ok(())
}

pub(crate) fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (ys[0] + ys[1]) * (xs[1] - xs[0]))
        .sum()
}

/// Log marginal posterior of `u` (up to a constant) on `u_nodes`, normalised.
pub fn u_marginal_log_posterior(
    data: &Dataset,
    prior: &Prior,
    u_nodes: &[f64],
) -> Result<UPosteriorGrid> {
    check_nodes(u_nodes, &prior.domain)?;
    let model = ConjugateModel::new(data, prior);
    let log_weights: Vec<f64> = u_nodes
        .iter()
        .map(|&u| prior.log_prior_u(u) + model.log_marginal(u))
        .collect();
    UPosteriorGrid::from_log_weights(u_nodes.to_vec(), log_weights, prior.domain)
}

/// Grid used by the CLI and the studies: a fine window of [`FINE_NODES`]
/// points spanning `u_hat ± 10 sd` (with `sd` from the empirical information
/// at the MLE) plus the observed temperatures inside it, merged with
/// [`COARSE_NODES`] domain-wide points.
pub fn default_u_grid(data: &Dataset, fit: &FitResult, domain: &Domain) -> Vec<f64> {
    let w = domain.width();
    let mut nodes: Vec<f64> = (0..COARSE_NODES)
        .map(|j| domain.lower + (j as f64 + 0.5) * w / COARSE_NODES as f64)
        .collect();
    let sd = empirical_information(&fit.theta_hat, data)
        .and_then(|i| i.inverse())
        .map(|inv| (inv.get(1, 1) / data.len() as f64).sqrt())
        .ok()
        .filter(|s| s.is_finite() && *s > 0.0);
    if let Some(sd) = sd {
        let eps = 1e-9 * w;
        let lo = (fit.theta_hat.u - FINE_HALF_WIDTH_SD * sd).max(domain.lower + eps);
        let hi = (fit.theta_hat.u + FINE_HALF_WIDTH_SD * sd).min(domain.upper - eps);
        if hi > lo {
            let step = (hi - lo) / (FINE_NODES - 1) as f64;
            nodes.extend((0..FINE_NODES).map(|j| lo + j as f64 * step));
            // The log marginal has a slope kink at every temperature; with the
            // kinks on nodes each trapezoid panel is smooth.
            nodes.extend(data.t().iter().copied().filter(|&t| t > lo && t < hi));
        }
    }
    nodes.sort_by(f64::total_cmp);
    nodes.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * w);
    nodes
}

/// Posterior mean and (optional) extras.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub theta_bayes: Theta,
    /// Posterior standard deviation of `(gamma, u, sigma2)`.
    pub sd: [f64; 3],
    pub samples: Option<Vec<Theta>>,
    pub bvm_l1_u: Option<f64>,
}

/// Posterior mean of `theta` by quadrature over the u-grid of the closed-form
/// conditional means.
pub fn bayes_estimator(
    grid: &UPosteriorGrid,
    data: &Dataset,
    prior: &Prior,
) -> Result<PosteriorSummary> {
    if prior.nig.a0 <= 1.0 || prior.max_moment_order() < 1 {
        return Err(Error::InfiniteMoment { a0: prior.nig.a0 });
    }
    let model = ConjugateModel::new(data, prior);
    let conds: Vec<NigPosterior> = grid.u_nodes.iter().map(|&u| model.conditional(u)).collect();
    let idx = |u: f64| grid.u_nodes.partition_point(|&v| v < u);
    let at = |u: f64| &conds[idx(u).min(conds.len() - 1)];

    let mean_u = grid.expectation(|u| u);
    let mean_gamma = grid.expectation(|u| at(u).mean_gamma());
    let mean_s2 = grid.expectation(|u| at(u).mean_sigma2());

    let var_u = grid.expectation(|u| (u - mean_u).powi(2));
    let var_gamma =
        grid.expectation(|u| at(u).var_gamma() + (at(u).mean_gamma() - mean_gamma).powi(2));
    let var_s2 = grid.expectation(|u| at(u).var_sigma2() + (at(u).mean_sigma2() - mean_s2).powi(2));

    Ok(PosteriorSummary {
        theta_bayes: Theta::new(mean_gamma, mean_u, mean_s2),
        sd: [var_gamma.sqrt(), var_u.sqrt(), var_s2.sqrt()],
        samples: None,
        bvm_l1_u: None,
    })
}

/// Exact composition sampling: `u` by inverse CDF on the interpolated grid
/// density, then `sigma2 | u` and `gamma | sigma2, u` from the conjugate
/// conditionals.
pub fn sample_posterior(
    grid: &UPosteriorGrid,
    data: &Dataset,
    prior: &Prior,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<Theta>> {
    let model = ConjugateModel::new(data, prior);
    let cumulative = grid.cumulative();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let p: f64 = Open01.sample(&mut rng);
        let u = grid.sample_u(&cumulative, p);
        let post = model.conditional(u);
        let g = Gamma::new(post.a, 1.0 / post.b).map_err(|e| invalid(e.to_string()))?;
        let sigma2 = 1.0 / g.sample(&mut rng);
        let z = normal_quantile(Open01.sample(&mut rng));
        let gamma = post.m + (sigma2 / post.k).sqrt() * z;
        draws.push(Theta::new(gamma, u, sigma2));
    }
    Ok(draws)
}

pub fn write_draws_csv<W: Write>(draws: &[Theta], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["gamma", "u", "sigma2"]).map_err(io)?;
    for d in draws {
        w.write_record([d.gamma.to_string(), d.u.to_string(), d.sigma2.to_string()])
            .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// L1 distance between the posterior density of `sqrt(n) (u - u_hat)` and
/// the Gaussian `N(0, [I^{-1}]_22)`.
///
/// Mass of the Gaussian outside the grid counts in full; the grid therefore
/// has to span `u_hat ± 6 sd / sqrt(n)` (or reach the domain edge).
pub fn bvm_l1_u(
    grid: &UPosteriorGrid,
    fit: &FitResult,
    info: &InfoMatrix,
    n: usize,
) -> Result<f64> {
    fit.require_clean()?;
    if grid.is_point_mass() {
        return Err(invalid("BvM distance needs a grid with at least two nodes"));
    }
    let var = info.inverse()?.get(1, 1);
    if !(var > 0.0) {
        return Err(Error::SingularInformation(
            "non-positive variance for u".into(),
        ));
    }
    let sd_t = var.sqrt();
    let root_n = (n as f64).sqrt();
    let u_hat = fit.theta_hat.u;

    let d = grid.domain;
    let slack = d.width() / 1000.0;
    let reach = BVM_COVERAGE_SD * sd_t / root_n;
    let needed_lower = (u_hat - reach).max(d.lower + slack);
    let needed_upper = (u_hat + reach).min(d.upper - slack);
    let (first, last) = (grid.u_nodes[0], grid.u_nodes[grid.len() - 1]);
    if first > needed_lower || last < needed_upper {
        return Err(Error::GridCoverage {
            grid_lower: first,
            grid_upper: last,
            needed_lower,
            needed_upper,
        });
    }

    let target = |u: f64| root_n * normal_pdf(root_n * (u - u_hat) / sd_t) / sd_t;
    let diffs: Vec<f64> = grid
        .u_nodes
        .iter()
        .zip(&grid.weights)
        .map(|(&u, &p)| (p - target(u)).abs())
        .collect();
    let inside = trapezoid(&grid.u_nodes, &diffs);
    let outside =
        normal_cdf(root_n * (first - u_hat) / sd_t) + normal_cdf(-root_n * (last - u_hat) / sd_t);
    Ok((inside + outside).clamp(0.0, 2.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RwmConfig {
    pub n_draws: usize,
    pub seed: u64,
    /// Proposal standard deviations on `(gamma, u, ln sigma2)`.
    pub step: [f64; 3],
    /// Adaptation iterations, discarded from the output.
    pub burn_in: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RwmOutput {
    pub draws: Vec<Theta>,
    pub acceptance_rate: f64,
    /// Proposal scales after adaptation.
    pub step: [f64; 3],
}

const ADAPT_BATCH: usize = 50;
const TARGET_ACCEPT: f64 = 0.3;

/// Random-walk Metropolis on `(gamma, u, ln sigma2)` for arbitrary priors,
/// started at the MLE.
///
/// During burn-in the proposal scales are tuned in batches of 50 towards a
/// 30% acceptance rate; zero acceptances over the whole burn-in is an error.
pub fn rwm_sampler<F>(
    data: &Dataset,
    domain: &Domain,
    log_prior: F,
    config: &RwmConfig,
) -> Result<RwmOutput>
where
    F: Fn(&Theta) -> f64,
{
    if config.n_draws == 0 {
        return Ok(RwmOutput {
            draws: Vec::new(),
            acceptance_rate: 0.0,
            step: config.step,
        });
    }
    if config.step.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(invalid("proposal steps must be positive"));
    }
    let fit = fit_mle(data, domain)?;
    if fit.theta_hat.sigma2 <= 0.0 {
        return Err(precondition(
            "MLE has zero variance; cannot start the sampler",
        ));
    }
    let log_target = |state: &[f64; 3]| -> f64 {
        let theta = Theta::new(state[0], state[1], state[2].exp());
        if !domain.interior(theta.u) {
            return f64::NEG_INFINITY;
        }
        let lp = log_prior(&theta);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        // ln sigma2 parametrisation: Jacobian sigma2.
        log_likelihood(&theta, data).unwrap_or(f64::NEG_INFINITY) + lp + state[2]
    };

    let mut state = [
        fit.theta_hat.gamma,
        fit.theta_hat.u,
        fit.theta_hat.sigma2.ln(),
    ];
    let mut current = log_target(&state);
    if !current.is_finite() {
        return Err(precondition("log prior is not finite at the MLE"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut step = config.step;
    let propose = |state: &[f64; 3], step: &[f64; 3], rng: &mut ChaCha8Rng| -> [f64; 3] {
        std::array::from_fn(|k| state[k] + step[k] * normal_quantile(Open01.sample(rng)))
    };

    let mut burn_accepts = 0usize;
    let mut batch_accepts = 0usize;
    for it in 0..config.burn_in {
        let cand = propose(&state, &step, &mut rng);
        let lc = log_target(&cand);
        if lc.is_finite() && rng.random::<f64>().ln() < lc - current {
            state = cand;
            current = lc;
            burn_accepts += 1;
            batch_accepts += 1;
        }
        if (it + 1) % ADAPT_BATCH == 0 {
            let rate = batch_accepts as f64 / ADAPT_BATCH as f64;
            let factor = (rate - TARGET_ACCEPT).exp();
            step.iter_mut().for_each(|s| *s *= factor);
            batch_accepts = 0;
        }
    }
    if config.burn_in > 0 && burn_accepts == 0 {
        return Err(Error::StepSize);
    }

    let mut draws = Vec::with_capacity(config.n_draws);
    let mut accepts = 0usize;
    for _ in 0..config.n_draws {
        let cand = propose(&state, &step, &mut rng);
        let lc = log_target(&cand);
        if lc.is_finite() && rng.random::<f64>().ln() < lc - current {
            state = cand;
            current = lc;
            accepts += 1;
        }
        draws.push(Theta::new(state[0], state[1], state[2].exp()));
    }
    Ok(RwmOutput {
        draws,
        acceptance_rate: accepts as f64 / config.n_draws as f64,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate;

    fn prior() -> Prior {
        Prior::new(UPrior::Uniform, NigPrior::default(), Domain::unit()).unwrap()
    }

    fn small_data() -> Dataset {
        Dataset::new(
            vec![0.1, 0.3, 0.45, 0.7, 0.9],
            vec![-0.7, -0.35, -0.1, 0.05, -0.02],
        )
        .unwrap()
    }

    #[test]
    fn moment_order() {
        let p = prior();
        assert_eq!(p.max_moment_order(), 2);
        let nig = NigPrior {
            a0: 3.0,
            ..NigPrior::default()
        };
        assert_eq!(
            Prior::new(UPrior::Uniform, nig, Domain::unit())
                .unwrap()
                .max_moment_order(),
            2
        );
        let nig = NigPrior {
            a0: 0.5,
            ..NigPrior::default()
        };
        assert_eq!(
            Prior::new(UPrior::Uniform, nig, Domain::unit())
                .unwrap()
                .max_moment_order(),
            0
        );
        let nig = NigPrior {
            k0: 0.0,
            ..NigPrior::default()
        };
        assert!(Prior::new(UPrior::Uniform, nig, Domain::unit()).is_err());
    }

    #[test]
    fn single_node_is_point_mass() {
        let g = u_marginal_log_posterior(&small_data(), &prior(), &[0.5]).unwrap();
        assert_eq!(g.weights, vec![1.0]);
        let draws = sample_posterior(&g, &small_data(), &prior(), 100, 7).unwrap();
        assert!(draws.iter().all(|d| d.u == 0.5));
    }

    #[test]
    fn invalid_nodes() {
        assert!(u_marginal_log_posterior(&small_data(), &prior(), &[]).is_err());
        assert!(u_marginal_log_posterior(&small_data(), &prior(), &[0.5, 0.4]).is_err());
        assert!(u_marginal_log_posterior(&small_data(), &prior(), &[0.0, 0.4]).is_err());
    }

    #[test]
    fn normalisation() {
        let nodes: Vec<f64> = (1..1000).map(|j| j as f64 / 1000.0).collect();
        let g = u_marginal_log_posterior(&small_data(), &prior(), &nodes).unwrap();
        assert!((g.total_mass() - 1.0).abs() < 1e-10);
        assert!(g.weights.iter().all(|&w| w >= 0.0));
        assert!((g.cdf(0.9995) - 1.0).abs() < 1e-12);
    }

    // Nested adaptive quadrature of ∫∫ likelihood × NIG dgamma dsigma2.
    // `scale` is the expected order of magnitude, used for the tolerances.
    fn brute_marginal(data: &Dataset, prior: &Prior, u: f64, scale: f64) -> f64 {
        let NigPrior { m0, k0, a0, b0 } = prior.nig;
        let (mut szz, mut szx) = (0.0, 0.0);
        for (t, x) in data.iter().filter(|&(t, _)| t <= u) {
            szz += (t - u) * (t - u);
            szx += (t - u) * x;
        }
        // Only the integration window uses these; the integrand is the raw density.
        let centre = (k0 * m0 + szx) / (k0 + szz);
        let inner = |s2: f64| {
            let f = |g: f64| {
                let ll = log_likelihood(&Theta::new(g, u, s2), data).unwrap();
                let lp = -0.5 * (2.0 * PI * s2 / k0).ln() - k0 * (g - m0).powi(2) / (2.0 * s2);
                (ll + lp).exp()
            };
            let spread = 12.0 * (s2 / (k0 + szz)).sqrt();
            let ig = (a0 * b0.ln() - ln_gamma(a0) - (a0 + 1.0) * s2.ln() - b0 / s2).exp();
            ig * integrate(f, centre - spread, centre + spread, 1e-10 * scale).unwrap()
        };
        // sigma2 = exp(l), integrate over l.
        integrate(|l: f64| inner(l.exp()) * l.exp(), -14.0, 8.0, 1e-8 * scale).unwrap()
    }

    #[test]
    fn marginal_matches_brute_force_quadrature() {
        let data = small_data();
        let p = prior();
        let model = ConjugateModel::new(&data, &p);
        for &u in &[0.2, 0.5, 0.8] {
            let closed = model.log_marginal(u).exp();
            let brute = brute_marginal(&data, &p, u, closed);
            assert!(
                ((closed - brute) / brute).abs() < 1e-4,
                "u={u}: {closed} vs {brute}"
            );
        }
    }

    #[test]
    fn conjugate_update_single_node() {
        let data = Dataset::new(vec![0.2, 0.5, 0.8], vec![-0.8, -0.2, 0.0]).unwrap();
        let nig = NigPrior {
            m0: 1.0,
            k0: 0.5,
            a0: 3.0,
            b0: 0.2,
        };
        let p = Prior::new(UPrior::Uniform, nig, Domain::unit()).unwrap();
        let g = u_marginal_log_posterior(&data, &p, &[0.6]).unwrap();
        let s = bayes_estimator(&g, &data, &p).unwrap();
        // Regressor z = (-0.4, -0.1, 0); Σz² = 0.17, Σzx = 0.34.
        let k = 0.5 + 0.17;
        let m = (0.5 * 1.0 + 0.34) / k;
        assert!((s.theta_bayes.gamma - m).abs() < 1e-12);
        assert_eq!(s.theta_bayes.u, 0.6);
        let b = 0.2 + 0.5 * (0.68 + 0.5 - k * m * m);
        assert!((s.theta_bayes.sigma2 - b / (3.0 + 1.5 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn infinite_moment_rejected() {
        let nig = NigPrior {
            a0: 1.0,
            ..NigPrior::default()
        };
        let p = Prior::new(UPrior::Uniform, nig, Domain::unit()).unwrap();
        let g = u_marginal_log_posterior(&small_data(), &p, &[0.3, 0.5]).unwrap();
        assert!(matches!(
            bayes_estimator(&g, &small_data(), &p),
            Err(Error::InfiniteMoment { .. })
        ));
    }

    #[test]
    fn sampling_is_deterministic() {
        let nodes: Vec<f64> = (1..200).map(|j| j as f64 / 200.0).collect();
        let g = u_marginal_log_posterior(&small_data(), &prior(), &nodes).unwrap();
        let a = sample_posterior(&g, &small_data(), &prior(), 500, 11).unwrap();
        let b = sample_posterior(&g, &small_data(), &prior(), 500, 11).unwrap();
        assert_eq!(a, b);
        let c = sample_posterior(&g, &small_data(), &prior(), 500, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn truncated_normal_u_prior_integrates_to_one() {
        let p = Prior::new(
            UPrior::TruncatedNormal {
                loc: 0.4,
                scale: 0.2,
            },
            NigPrior::default(),
            Domain::unit(),
        )
        .unwrap();
        let mass = integrate(|u| p.log_prior_u(u).exp(), 1e-12, 1.0 - 1e-12, 1e-12).unwrap();
        assert!((mass - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rwm_zero_draws_and_determinism() {
        let data = small_data();
        let p = prior();
        let cfg = RwmConfig {
            n_draws: 0,
            seed: 1,
            step: [0.1, 0.05, 0.2],
            burn_in: 100,
        };
        let out = rwm_sampler(&data, &Domain::unit(), |t| p.log_density(t), &cfg).unwrap();
        assert!(out.draws.is_empty());

        let cfg = RwmConfig {
            n_draws: 300,
            ..cfg
        };
        let a = rwm_sampler(&data, &Domain::unit(), |t| p.log_density(t), &cfg).unwrap();
        let b = rwm_sampler(&data, &Domain::unit(), |t| p.log_density(t), &cfg).unwrap();
        assert_eq!(a.draws, b.draws);
        assert!(a.acceptance_rate > 0.0);
    }

    #[test]
    fn rwm_rejects_hopeless_steps() {
        let data = small_data();
        let p = prior();
        let cfg = RwmConfig {
            n_draws: 10,
            seed: 1,
            step: [1e6, 1e6, 1e6],
            burn_in: 20,
        };
        assert!(matches!(
            rwm_sampler(&data, &Domain::unit(), |t| p.log_density(t), &cfg),
            Err(Error::StepSize)
        ));
    }
}
