// SPDX-License-Identifier: MIT OR Apache-2.0

//! Monte Carlo studies of the estimators under a known `theta0`.
//!
//! Every replicate `(n, r)` draws from its own ChaCha stream keyed by the
//! scenario seed, so any record can be regenerated on its own and the worker
//! count never changes the results.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Open01};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{ks_statistic, normal_cdf, normal_pdf, normal_quantile};
use crate::error::{invalid, Error, Result};
use crate::estimate::{fit_mle, FitResult};
use crate::fisher::{asymptotic_information, wald_interval, InfoMatrix, InfoSource};
use crate::model::{Dataset, Design, Domain, LimitDesign, Theta};
use crate::posterior::{
    bayes_estimator, bvm_l1_u, default_u_grid, u_marginal_log_posterior, Prior,
};
use crate::pseudo::{fit_pseudo, mle_gap, WindowRule};
use crate::quad::{integrate_split, DEFAULT_ABS_TOL};

/// Jitter of periodic designs is a normal truncated at this many sd.
pub const JITTER_TRUNCATION: f64 = 3.0;
/// Largest failure rate per sample size tolerated by [`check_acceptance`].
pub const MAX_FAILURE_RATE: f64 = 0.05;
/// Radius of the neighbourhood of `u0` whose posterior mass is tracked.
pub const CONCENTRATION_RADIUS: f64 = 0.1;

const MAX_REPLICATES: usize = 1 << 22;

/// Deterministic temperature pattern repeated cyclically, plus jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodicDesign {
    pub domain: Domain,
    pub pattern: Vec<f64>,
    pub jitter_sd: f64,
}

impl PeriodicDesign {
    /// `k` cell midpoints of the domain.
    pub fn equispaced(domain: Domain, k: usize, jitter_sd: f64) -> Result<Self> {
        let w = domain.width();
        let pattern = (0..k)
            .map(|j| domain.lower + (j as f64 + 0.5) * w / k as f64)
            .collect();
        let d = Self {
            domain,
            pattern,
            jitter_sd,
        };
        d.check()?;
        Ok(d)
    }

    pub fn check(&self) -> Result<()> {
        self.domain.check()?;
        if self.pattern.is_empty() {
            return Err(invalid("periodic pattern is empty"));
        }
        if let Some(p) = self.pattern.iter().find(|&&p| !self.domain.contains(p)) {
            return Err(invalid(format!("pattern point {p} outside the domain")));
        }
        if !(self.jitter_sd >= 0.0 && self.jitter_sd.is_finite()) {
            return Err(invalid(format!(
                "jitter sd must be >= 0, got {}",
                self.jitter_sd
            )));
        }
        Ok(())
    }

    fn truncation_mass() -> f64 {
        normal_cdf(JITTER_TRUNCATION) - normal_cdf(-JITTER_TRUNCATION)
    }
}

impl Design for PeriodicDesign {
    fn domain(&self) -> Domain {
        self.domain
    }

    // Equal-weight mixture of clamped truncated normals: a continuous part
    // per pattern point plus atoms where the jitter is clamped at the edges.
    fn integrate_below<H: Fn(f64) -> f64>(&self, h: H, upto: f64, kinks: &[f64]) -> Result<f64> {
        let d = self.domain;
        let upto = upto.clamp(d.lower, d.upper);
        let weight = 1.0 / self.pattern.len() as f64;
        let sd = self.jitter_sd;
        let mut total = 0.0;
        for &p in &self.pattern {
            if sd == 0.0 {
                if p <= upto {
                    total += weight * h(p);
                }
                continue;
            }
            let z = Self::truncation_mass();
            let phi_lo = normal_cdf(-JITTER_TRUNCATION);
            let lo_atom = ((normal_cdf((d.lower - p) / sd) - phi_lo) / z).max(0.0);
            let hi_atom = ((phi_lo + z - normal_cdf((d.upper - p) / sd)) / z).max(0.0);
            total += weight * lo_atom * h(d.lower);
            if upto >= d.upper {
                total += weight * hi_atom * h(d.upper);
            }
            let a = (p - JITTER_TRUNCATION * sd).max(d.lower);
            let b = (p + JITTER_TRUNCATION * sd).min(upto);
            if b > a {
                let f = |t: f64| h(t) * normal_pdf((t - p) / sd) / (sd * z);
                total += weight * integrate_split(f, a, b, kinks, DEFAULT_ABS_TOL)?;
            }
        }
        Ok(total)
    }

    fn density(&self, t: f64) -> f64 {
        let sd = self.jitter_sd;
        if sd == 0.0 || !self.domain.contains(t) {
            return 0.0;
        }
        let z = Self::truncation_mass();
        let weight = 1.0 / self.pattern.len() as f64;
        self.pattern
            .iter()
            .filter(|&&p| (t - p).abs() <= JITTER_TRUNCATION * sd)
            .map(|&p| weight * normal_pdf((t - p) / sd) / (sd * z))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureDesign {
    Iid(LimitDesign),
    Periodic(PeriodicDesign),
}

impl TemperatureDesign {
    pub fn check(&self) -> Result<()> {
        match self {
            Self::Iid(d) => d.check(),
            Self::Periodic(d) => d.check(),
        }
    }
}

impl Design for TemperatureDesign {
    fn domain(&self) -> Domain {
        match self {
            Self::Iid(d) => d.domain(),
            Self::Periodic(d) => d.domain(),
        }
    }

    fn integrate_below<H: Fn(f64) -> f64>(&self, h: H, upto: f64, kinks: &[f64]) -> Result<f64> {
        match self {
            Self::Iid(d) => d.integrate_below(h, upto, kinks),
            Self::Periodic(d) => d.integrate_below(h, upto, kinks),
        }
    }

    fn density(&self, t: f64) -> f64 {
        match self {
            Self::Iid(d) => d.density(t),
            Self::Periodic(d) => d.density(t),
        }
    }
}

fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    normal_quantile(Open01.sample(rng))
}

/// Temperatures from `design` using the given generator.
pub fn gen_temperatures_with<R: Rng>(
    design: &TemperatureDesign,
    n: usize,
    rng: &mut R,
) -> Vec<f64> {
    match design {
        TemperatureDesign::Iid(d) => (0..n).map(|_| d.quantile(Open01.sample(rng))).collect(),
        TemperatureDesign::Periodic(d) => {
            let lo = normal_cdf(-JITTER_TRUNCATION);
            let z = PeriodicDesign::truncation_mass();
            (0..n)
                .map(|i| {
                    let p = d.pattern[i % d.pattern.len()];
                    if d.jitter_sd == 0.0 {
                        return p;
                    }
                    let v: f64 = Open01.sample(rng);
                    let e =
                        normal_quantile(lo + v * z).clamp(-JITTER_TRUNCATION, JITTER_TRUNCATION);
                    (p + d.jitter_sd * e).clamp(d.domain.lower, d.domain.upper)
                })
                .collect()
        }
    }
}

/// iid designs by inverse CDF; periodic designs tile the pattern in order.
pub fn gen_temperatures(design: &TemperatureDesign, n: usize, seed: u64) -> Vec<f64> {
    gen_temperatures_with(design, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn gen_observations_with<R: Rng>(
    theta0: &Theta,
    temps: Vec<f64>,
    rng: &mut R,
) -> Result<Dataset> {
    if !(theta0.sigma2 >= 0.0) {
        return Err(invalid("sigma2 must be >= 0"));
    }
    let sd = theta0.sigma2.sqrt();
    let x = temps
        .iter()
        .map(|&t| {
            let m = theta0.mean(t);
            if sd == 0.0 {
                m
            } else {
                m + sd * std_normal(rng)
            }
        })
        .collect();
    Dataset::new(temps, x)
}

/// `x_i = mu(t_i) + sigma0 z_i` with `z_i` by inverse CDF.
pub fn gen_observations(theta0: &Theta, temps: Vec<f64>, seed: u64) -> Result<Dataset> {
    gen_observations_with(theta0, temps, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Mle,
    Posterior,
    Pseudo,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub theta0: Theta,
    pub design: TemperatureDesign,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub prior: Prior,
    pub window_rule: WindowRule,
    pub outputs: BTreeSet<Pipeline>,
    pub wald_level: f64,
}

impl Scenario {
    /// Uniform design on `[0, 1]`, `theta0 = (2, 0.5, 0.25)`, every pipeline.
    pub fn reference() -> Self {
        use crate::posterior::{NigPrior, UPrior};
        let domain = Domain::unit();
        Self {
            name: "reference".into(),
            theta0: Theta::new(2.0, 0.5, 0.25),
            design: TemperatureDesign::Iid(LimitDesign::uniform(domain)),
            n_grid: vec![200, 500, 1000, 2000],
            replicates: 500,
            seed: 20_240_601,
            prior: Prior::new(UPrior::Uniform, NigPrior::default(), domain)
                .expect("valid default prior"),
            window_rule: WindowRule::default(),
            outputs: [Pipeline::Mle, Pipeline::Posterior, Pipeline::Pseudo].into(),
            wald_level: 0.95,
        }
    }

    pub fn domain(&self) -> Domain {
        self.design.domain()
    }

    pub fn validate(&self) -> Result<()> {
        self.design.check()?;
        let domain = self.domain();
        if self.is_noiseless() {
            // Noiseless recovery runs: only the MLE is defined at sigma2 = 0.
            Theta {
                sigma2: 1.0,
                ..self.theta0
            }
            .validate(&domain)?;
            if self.outputs.iter().any(|&p| p != Pipeline::Mle) {
                return Err(invalid(
                    "a noiseless theta0 (sigma2 = 0) supports only the mle output",
                ));
            }
        } else {
            self.theta0.validate(&domain)?;
        }
        if self.n_grid.is_empty() || !self.n_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(invalid("n_grid must be non-empty and strictly increasing"));
        }
        if self.n_grid[0] < 3 {
            return Err(invalid("every n in n_grid must be at least 3"));
        }
        if self.replicates == 0 || self.replicates > MAX_REPLICATES {
            return Err(invalid(format!(
                "replicates must lie in [1, {MAX_REPLICATES}]"
            )));
        }
        if self.prior.domain != domain {
            return Err(invalid("prior domain differs from the design domain"));
        }
        self.window_rule.check()?;
        if !(self.wald_level > 0.0 && self.wald_level < 1.0) {
            return Err(invalid("wald_level must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn is_noiseless(&self) -> bool {
        self.theta0.sigma2 == 0.0
    }

    pub fn wants(&self, p: Pipeline) -> bool {
        p == Pipeline::Mle || self.outputs.contains(&p)
    }

    /// `I(theta0)` under the scenario's design.
    pub fn limit_information(&self) -> Result<InfoMatrix> {
        asymptotic_information(&self.theta0, &self.design)
    }
}

#[derive(Clone, Copy)]
enum Purpose {
    Temperatures = 0,
    Noise = 1,
}

/// Generator for one purpose of replicate `(n, r)`: the scenario seed is the
/// ChaCha key and `(n, r, purpose)` selects the stream.
fn replicate_rng(seed: u64, n: usize, r: usize, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((n as u64) << 24) | ((r as u64) << 2) | purpose as u64);
    rng
}

/// The dataset behind replicate `(n, r)`.
pub fn replicate_data(scenario: &Scenario, n: usize, r: usize) -> Result<Dataset> {
    let temps = gen_temperatures_with(
        &scenario.design,
        n,
        &mut replicate_rng(scenario.seed, n, r, Purpose::Temperatures),
    );
    gen_observations_with(
        &scenario.theta0,
        temps,
        &mut replicate_rng(scenario.seed, n, r, Purpose::Noise),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub n: usize,
    pub rep_id: usize,
    pub theta_hat: Theta,
    pub error: [f64; 3],
    pub error_norm: f64,
    /// Absent for flagged fits, where intervals are undefined.
    pub wald_covered: Option<[bool; 3]>,
    pub flags: Vec<String>,
    pub theta_bayes: Option<Theta>,
    pub bvm_l1_u: Option<f64>,
    pub bayes_gap: Option<f64>,
    /// Posterior mass of `|u - u0| < 0.1`.
    pub u_mass_near_u0: Option<f64>,
    pub theta_hat_pseudo: Option<Theta>,
    pub pseudo_gap: Option<f64>,
    pub deleted_fraction: Option<f64>,
    /// BvM distance of the pseudo-problem posterior, centred at its MLE.
    pub bvm_l1_u_pseudo: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Failure {
    pub n: usize,
    pub rep_id: usize,
    pub reason: String,
}

fn norm(v: &[f64; 3]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Runs every requested pipeline on replicate `(n, r)`.
///
/// Flagged fits are errors, except in noiseless scenarios where the flags
/// are the expected outcome and are recorded.
pub fn run_replicate(scenario: &Scenario, n: usize, r: usize) -> Result<ReplicateRecord> {
    let domain = scenario.domain();
    let data = replicate_data(scenario, n, r)?;
    let fit = fit_mle(&data, &domain)?;
    if !scenario.is_noiseless() {
        fit.require_clean()?;
    }
    let t0 = scenario.theta0.to_array();
    let est = fit.theta_hat.to_array();
    let error: [f64; 3] = std::array::from_fn(|k| est[k] - t0[k]);
    let wald_covered = if fit.is_flagged() {
        None
    } else {
        let intervals = wald_interval(&fit, InfoSource::Empirical(&data), scenario.wald_level)?;
        Some(std::array::from_fn(|k| intervals[k].contains(t0[k])))
    };
    let mut rec = ReplicateRecord {
        n,
        rep_id: r,
        theta_hat: fit.theta_hat,
        error,
        error_norm: norm(&error),
        wald_covered,
        flags: fit.flags.iter().map(|f| f.to_string()).collect(),
        theta_bayes: None,
        bvm_l1_u: None,
        bayes_gap: None,
        u_mass_near_u0: None,
        theta_hat_pseudo: None,
        pseudo_gap: None,
        deleted_fraction: None,
        bvm_l1_u_pseudo: None,
    };
    let root_n = (n as f64).sqrt();
    let u0 = scenario.theta0.u;

    let info0 = scenario
        .wants(Pipeline::Posterior)
        .then(|| scenario.limit_information())
        .transpose()?;
    if let Some(info0) = &info0 {
        let (grid, summary) = posterior_at(&data, &fit, &scenario.prior, &domain)?;
        rec.bvm_l1_u = Some(bvm_l1_u(&grid, &fit, info0, n)?);
        let gap: [f64; 3] =
            std::array::from_fn(|k| root_n * (summary.theta_bayes.to_array()[k] - est[k]));
        rec.bayes_gap = Some(norm(&gap));
        rec.theta_bayes = Some(summary.theta_bayes);
        rec.u_mass_near_u0 =
            Some(grid.mass_between(u0 - CONCENTRATION_RADIUS, u0 + CONCENTRATION_RADIUS));
    }

    if scenario.wants(Pipeline::Pseudo) {
        let pf = fit_pseudo(&data, u0, &scenario.window_rule, &domain)?;
        rec.pseudo_gap = Some(norm(&mle_gap(&fit, &pf.fit, n)?));
        rec.deleted_fraction = Some(pf.deleted_count as f64 / n as f64);
        rec.theta_hat_pseudo = Some(pf.fit.theta_hat);
        if let Some(info0) = &info0 {
            let pseudo = crate::pseudo::pseudo_delete(&data, u0, &scenario.window_rule)?;
            let (grid, _) = posterior_at(&pseudo.kept, &pf.fit, &scenario.prior, &domain)?;
            rec.bvm_l1_u_pseudo = Some(bvm_l1_u(&grid, &pf.fit, info0, n)?);
        }
    }
    Ok(rec)
}

fn posterior_at(
    data: &Dataset,
    fit: &FitResult,
    prior: &Prior,
    domain: &Domain,
) -> Result<(
    crate::posterior::UPosteriorGrid,
    crate::posterior::PosteriorSummary,
)> {
    let nodes = default_u_grid(data, fit, domain);
    let grid = u_marginal_log_posterior(data, prior, &nodes)?;
    let summary = bayes_estimator(&grid, data, prior)?;
    Ok((grid, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub n: usize,
    pub records: usize,
    pub failures: usize,
    pub median_error: f64,
    pub q90_error: f64,
    /// Sample covariance of `sqrt(n) (theta_hat - theta0)`.
    pub covariance: [[f64; 3]; 3],
    /// `||cov - I^{-1}||_F / ||I^{-1}||_F`.
    pub cov_rel_frobenius: f64,
    pub ks: [f64; 3],
    pub wald_coverage: [f64; 3],
    pub median_bvm_l1_u: Option<f64>,
    pub median_bvm_l1_u_pseudo: Option<f64>,
    pub median_bayes_gap: Option<f64>,
    pub mean_u_mass_near_u0: Option<f64>,
    pub median_pseudo_gap: Option<f64>,
    pub mean_deleted_fraction: Option<f64>,
    /// `d_n f(u0)`.
    pub expected_deleted_fraction: Option<f64>,
    /// Exact design mass of the deletion window.
    pub window_mass: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Meta {
    pub version: String,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyReport {
    pub scenario: Scenario,
    pub aggregates: Vec<Aggregate>,
    pub rate_slope: Option<f64>,
    pub failures: Vec<Failure>,
    pub meta: Meta,
    #[serde(skip)]
    pub records: Vec<ReplicateRecord>,
    /// `I(theta0)`; undefined for noiseless scenarios.
    #[serde(skip)]
    pub limit_information: Option<InfoMatrix>,
}

/// Median of the values; NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linearly interpolated sample quantile (`p` in `[0, 1]`).
pub fn quantile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = p * (v.len() - 1) as f64;
    let i = h.floor() as usize;
    let j = (i + 1).min(v.len() - 1);
    v[i] + (h - i as f64) * (v[j] - v[i])
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample covariance (divisor `m - 1`).
pub fn sample_covariance(samples: &[[f64; 3]]) -> [[f64; 3]; 3] {
    let m = samples.len() as f64;
    let mu: [f64; 3] = std::array::from_fn(|k| samples.iter().map(|s| s[k]).sum::<f64>() / m);
    std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            samples
                .iter()
                .map(|s| (s[i] - mu[i]) * (s[j] - mu[j]))
                .sum::<f64>()
                / (m - 1.0)
        })
    })
}

fn rel_frobenius(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            num += (a[i][j] - b[i][j]).powi(2);
            den += b[i][j].powi(2);
        }
    }
    (num / den).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormalityDiagnostics {
    pub n: usize,
    pub replicates: usize,
    pub covariance: [[f64; 3]; 3],
    pub rel_frobenius: f64,
    pub ks: [f64; 3],
}

/// Covariance and KS diagnostics of `sqrt(n)`-scaled errors `z` against
/// `N(0, cov_target)`.
pub fn normality_from_samples(
    scaled: &[[f64; 3]],
    cov_target: &InfoMatrix,
    n: usize,
) -> NormalityDiagnostics {
    let covariance = sample_covariance(scaled);
    let target = cov_target.as_array();
    let ks = std::array::from_fn(|k| {
        let sd = target[k][k].sqrt();
        let z: Vec<f64> = scaled.iter().map(|s| s[k] / sd).collect();
        ks_statistic(&z, normal_cdf)
    });
    NormalityDiagnostics {
        n,
        replicates: scaled.len(),
        rel_frobenius: rel_frobenius(&covariance, target),
        covariance,
        ks,
    }
}

fn scaled_errors(records: &[&ReplicateRecord]) -> Vec<[f64; 3]> {
    records
        .iter()
        .map(|r| {
            let s = (r.n as f64).sqrt();
            std::array::from_fn(|k| s * r.error[k])
        })
        .collect()
}

/// Diagnostics at the largest sample size of the report.
pub fn normality_diagnostics(
    report: &StudyReport,
    theta0: &Theta,
    info: &InfoMatrix,
) -> Result<NormalityDiagnostics> {
    let n = *report
        .scenario
        .n_grid
        .last()
        .ok_or_else(|| invalid("empty n_grid"))?;
    let recs: Vec<&ReplicateRecord> = report.records.iter().filter(|r| r.n == n).collect();
    if recs.len() < 100 {
        return Err(Error::Precondition(format!(
            "normality diagnostics need >= 100 replicates at n = {n}, have {}",
            recs.len()
        )));
    }
    debug_assert!(recs.iter().all(|r| {
        let t = r.theta_hat.to_array();
        let t0 = theta0.to_array();
        (0..3).all(|k| (t[k] - t0[k] - r.error[k]).abs() <= 1e-9 * (1.0 + t0[k].abs()))
    }));
    Ok(normality_from_samples(
        &scaled_errors(&recs),
        &info.inverse()?,
        n,
    ))
}

/// OLS slope of `ln median` against `ln n`.
pub fn slope_of(ns: &[usize], medians: &[f64]) -> Result<f64> {
    if ns.len() != medians.len() || ns.len() < 3 {
        return Err(Error::Precondition(
            "rate slope needs at least 3 sample sizes".into(),
        ));
    }
    if medians.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
        return Err(Error::Precondition(
            "rate slope needs positive finite medians".into(),
        ));
    }
    let x: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let y: Vec<f64> = medians.iter().map(|m| m.ln()).collect();
    let (mx, my) = (mean(&x), mean(&y));
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

pub const RATE_MIN_REPLICATES: usize = 50;

pub fn rate_slope(report: &StudyReport) -> Result<f64> {
    let usable: Vec<&Aggregate> = report
        .aggregates
        .iter()
        .filter(|a| a.records >= RATE_MIN_REPLICATES)
        .collect();
    if usable.len() < 3 {
        return Err(Error::Precondition(format!(
            "rate slope needs >= 3 sample sizes with >= {RATE_MIN_REPLICATES} replicates"
        )));
    }
    let ns: Vec<usize> = usable.iter().map(|a| a.n).collect();
    let med: Vec<f64> = usable.iter().map(|a| a.median_error).collect();
    slope_of(&ns, &med)
}

fn opt_median(values: Vec<f64>) -> Option<f64> {
    (!values.is_empty()).then(|| median(&values))
}

fn opt_mean(values: Vec<f64>) -> Option<f64> {
    (!values.is_empty()).then(|| mean(&values))
}

fn aggregate(
    scenario: &Scenario,
    n: usize,
    recs: &[&ReplicateRecord],
    failures: usize,
    cov_target: Option<&InfoMatrix>,
) -> Aggregate {
    let errs: Vec<f64> = recs.iter().map(|r| r.error_norm).collect();
    let diag = if let (true, Some(target)) = (recs.len() >= 2, cov_target) {
        normality_from_samples(&scaled_errors(recs), target, n)
    } else {
        NormalityDiagnostics {
            n,
            replicates: recs.len(),
            covariance: [[f64::NAN; 3]; 3],
            rel_frobenius: f64::NAN,
            ks: [f64::NAN; 3],
        }
    };
    let covered: Vec<[bool; 3]> = recs.iter().filter_map(|r| r.wald_covered).collect();
    let m = covered.len() as f64;
    let collect = |f: fn(&ReplicateRecord) -> Option<f64>| {
        recs.iter().filter_map(|r| f(r)).collect::<Vec<f64>>()
    };
    let expected_deleted_fraction = scenario
        .wants(Pipeline::Pseudo)
        .then(|| scenario.window_rule.width(n) * scenario.design.density(scenario.theta0.u));
    Aggregate {
        n,
        records: recs.len(),
        failures,
        median_error: median(&errs),
        q90_error: quantile(&errs, 0.9),
        covariance: diag.covariance,
        cov_rel_frobenius: diag.rel_frobenius,
        ks: diag.ks,
        wald_coverage: std::array::from_fn(|k| covered.iter().filter(|c| c[k]).count() as f64 / m),
        median_bvm_l1_u: opt_median(collect(|r| r.bvm_l1_u)),
        median_bvm_l1_u_pseudo: opt_median(collect(|r| r.bvm_l1_u_pseudo)),
        median_bayes_gap: opt_median(collect(|r| r.bayes_gap)),
        mean_u_mass_near_u0: opt_mean(collect(|r| r.u_mass_near_u0)),
        median_pseudo_gap: opt_median(collect(|r| r.pseudo_gap)),
        mean_deleted_fraction: opt_mean(collect(|r| r.deleted_fraction)),
        expected_deleted_fraction,
        window_mass: scenario
            .wants(Pipeline::Pseudo)
            .then(|| window_mass(scenario, n))
            .flatten(),
    }
}

fn window_mass(scenario: &Scenario, n: usize) -> Option<f64> {
    let half = 0.5 * scenario.window_rule.width(n);
    let u0 = scenario.theta0.u;
    let below = |v: f64| scenario.design.integrate_below(|_| 1.0, v, &[]).ok();
    // Open window: atoms at u0 ± d/2 would sit on its edge, not inside.
    Some(below(u0 + half - 1e-12 * half)? - below(u0 - half)?)
}

/// Runs the scenario on `workers` threads (0 = rayon default).
pub fn run_study(scenario: &Scenario, workers: usize) -> Result<StudyReport> {
    scenario.validate()?;
    let start = Instant::now();
    let info0 = (!scenario.is_noiseless())
        .then(|| scenario.limit_information())
        .transpose()?;
    let cov_target = info0.as_ref().map(InfoMatrix::inverse).transpose()?;
    let tasks: Vec<(usize, usize)> = scenario
        .n_grid
        .iter()
        .flat_map(|&n| (0..scenario.replicates).map(move |r| (n, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<std::result::Result<ReplicateRecord, Failure>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(n, r)| {
                run_replicate(scenario, n, r).map_err(|e| Failure {
                    n,
                    rep_id: r,
                    reason: e.to_string(),
                })
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(rec) => records.push(rec),
            Err(f) => failures.push(f),
        }
    }
    let aggregates: Vec<Aggregate> = scenario
        .n_grid
        .iter()
        .map(|&n| {
            let recs: Vec<&ReplicateRecord> = records.iter().filter(|r| r.n == n).collect();
            let nf = failures.iter().filter(|f| f.n == n).count();
            aggregate(scenario, n, &recs, nf, cov_target.as_ref())
        })
        .collect();
    let mut report = StudyReport {
        scenario: scenario.clone(),
        aggregates,
        rate_slope: None,
        failures,
        meta: Meta {
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_s: 0.0,
        },
        records,
        limit_information: info0,
    };
    report.rate_slope = rate_slope(&report).ok();
    report.meta.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

impl StudyReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(std::io::Error::other(e)))
    }

    pub fn write_records_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record([
            "n",
            "rep_id",
            "gamma_hat",
            "u_hat",
            "sigma2_hat",
            "error_norm",
            "gamma_bayes",
            "u_bayes",
            "sigma2_bayes",
            "bvm_l1_u",
            "bayes_gap",
            "gamma_pseudo",
            "u_pseudo",
            "sigma2_pseudo",
            "pseudo_gap",
            "deleted_fraction",
            "covered_gamma",
            "covered_u",
            "covered_sigma2",
            "flags",
        ])
        .map_err(io)?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let cov = |r: &ReplicateRecord, k: usize| {
            r.wald_covered.map(|c| c[k].to_string()).unwrap_or_default()
        };
        for r in &self.records {
            let tb = r.theta_bayes.map(|t| t.to_array());
            let tp = r.theta_hat_pseudo.map(|t| t.to_array());
            w.write_record([
                r.n.to_string(),
                r.rep_id.to_string(),
                r.theta_hat.gamma.to_string(),
                r.theta_hat.u.to_string(),
                r.theta_hat.sigma2.to_string(),
                r.error_norm.to_string(),
                opt(tb.map(|a| a[0])),
                opt(tb.map(|a| a[1])),
                opt(tb.map(|a| a[2])),
                opt(r.bvm_l1_u),
                opt(r.bayes_gap),
                opt(tp.map(|a| a[0])),
                opt(tp.map(|a| a[1])),
                opt(tp.map(|a| a[2])),
                opt(r.pseudo_gap),
                opt(r.deleted_fraction),
                cov(r, 0),
                cov(r, 1),
                cov(r, 2),
                r.flags.join(";"),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One line per sample size.
    pub fn summary_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        let mut s = format!(
            "{:>7} {:>8} {:>6} {:>12} {:>10} {:>10} {:>10} {:>10}\n",
            "n", "records", "fails", "median_err", "cov_dist", "bvm_med", "bayes_gap", "pseudo_gap"
        );
        for a in &self.aggregates {
            s.push_str(&format!(
                "{:>7} {:>8} {:>6} {:>12.5} {:>10.4} {:>10} {:>10} {:>10}\n",
                a.n,
                a.records,
                a.failures,
                a.median_error,
                a.cov_rel_frobenius,
                fmt(a.median_bvm_l1_u),
                fmt(a.median_bayes_gap),
                fmt(a.median_pseudo_gap)
            ));
        }
        s.push_str(&format!("rate slope: {}\n", fmt(self.rate_slope)));
        s
    }
}

/// Outcome of one acceptance threshold.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn series(report: &StudyReport, f: fn(&Aggregate) -> Option<f64>) -> Option<Vec<f64>> {
    report.aggregates.iter().map(f).collect()
}

pub const RATE_SLOPE_RANGE: (f64, f64) = (-0.6, -0.4);
pub const MAX_COV_DISTANCE: f64 = 0.20;
pub const MAX_KS: f64 = 0.08;
pub const COVERAGE_RANGE: (f64, f64) = (0.92, 0.98);
pub const MAX_BVM: f64 = 0.25;
pub const MAX_BAYES_GAP: f64 = 0.3;
pub const DELETED_FRACTION_REL_TOL: f64 = 0.15;

/// Threshold checks on a finished study; only pipelines the scenario ran
/// are checked.
pub fn check_acceptance(report: &StudyReport) -> Vec<Check> {
    let mut out = Vec::new();
    let reps = report.scenario.replicates as f64;
    let worst = report
        .aggregates
        .iter()
        .map(|a| a.failures as f64 / reps)
        .fold(0.0, f64::max);
    out.push(Check::new(
        "failure_rate",
        worst <= MAX_FAILURE_RATE,
        format!("worst failure rate {worst:.4} (max {MAX_FAILURE_RATE})"),
    ));

    let medians: Vec<f64> = report.aggregates.iter().map(|a| a.median_error).collect();
    match report.rate_slope {
        Some(s) => out.push(Check::new(
            "rate_slope",
            (RATE_SLOPE_RANGE.0..=RATE_SLOPE_RANGE.1).contains(&s),
            format!("slope {s:.4}, medians {medians:.5?}"),
        )),
        None => out.push(Check::new(
            "rate_slope",
            false,
            "rate slope unavailable".into(),
        )),
    }

    if let Some(last) = report.aggregates.last() {
        out.push(Check::new(
            "covariance",
            last.cov_rel_frobenius <= MAX_COV_DISTANCE,
            format!(
                "relative Frobenius distance {:.4} at n = {}",
                last.cov_rel_frobenius, last.n
            ),
        ));
        out.push(Check::new(
            "ks",
            last.ks.iter().all(|&k| k <= MAX_KS),
            format!("KS {:.4?} at n = {}", last.ks, last.n),
        ));
        out.push(Check::new(
            "wald_coverage",
            last.wald_coverage
                .iter()
                .all(|c| (COVERAGE_RANGE.0..=COVERAGE_RANGE.1).contains(c)),
            format!("coverage {:.4?} at n = {}", last.wald_coverage, last.n),
        ));
    }

    if report.scenario.wants(Pipeline::Posterior) {
        if let Some(bvm) = series(report, |a| a.median_bvm_l1_u) {
            let last = *bvm.last().unwrap_or(&f64::NAN);
            out.push(Check::new(
                "bvm",
                strictly_decreasing(&bvm) && last <= MAX_BVM,
                format!("median L1 {bvm:.4?}"),
            ));
        }
        if let Some(gap) = series(report, |a| a.median_bayes_gap) {
            let last = *gap.last().unwrap_or(&f64::NAN);
            out.push(Check::new(
                "bayes_gap",
                strictly_decreasing(&gap) && last <= MAX_BAYES_GAP,
                format!("median gap {gap:.4?}"),
            ));
        }
    }
    if report.scenario.wants(Pipeline::Pseudo) {
        if let Some(gap) = series(report, |a| a.median_pseudo_gap) {
            out.push(Check::new(
                "pseudo_gap",
                strictly_decreasing(&gap),
                format!("median gap {gap:.4?}"),
            ));
        }
        if let Some(last) = report.aggregates.last() {
            if let (Some(obs), Some(exp)) =
                (last.mean_deleted_fraction, last.expected_deleted_fraction)
            {
                let rel = (obs / exp - 1.0).abs();
                out.push(Check::new(
                    "deleted_fraction",
                    rel <= DELETED_FRACTION_REL_TOL,
                    format!("observed {obs:.5}, expected {exp:.5}, relative error {rel:.4}"),
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sup_cdf_deviation;

    fn uniform() -> TemperatureDesign {
        TemperatureDesign::Iid(LimitDesign::uniform(Domain::unit()))
    }

    #[test]
    fn uniform_temperatures_follow_design() {
        let t = gen_temperatures(&uniform(), 100_000, 3);
        let d = Dataset::new(t, vec![0.0; 100_000]).unwrap();
        assert!(sup_cdf_deviation(&d, &LimitDesign::uniform(Domain::unit()), 2001).unwrap() < 0.01);
    }

    #[test]
    fn periodic_tiling() {
        let d = TemperatureDesign::Periodic(PeriodicDesign {
            domain: Domain::unit(),
            pattern: vec![0.25, 0.75],
            jitter_sd: 0.0,
        });
        assert_eq!(gen_temperatures(&d, 4, 1), vec![0.25, 0.75, 0.25, 0.75]);
    }

    #[test]
    fn generators_are_deterministic() {
        let d = uniform();
        assert_eq!(gen_temperatures(&d, 50, 9), gen_temperatures(&d, 50, 9));
        assert_ne!(gen_temperatures(&d, 50, 9), gen_temperatures(&d, 50, 10));
        let th = Theta::new(2.0, 0.5, 0.25);
        let t = gen_temperatures(&d, 50, 9);
        assert_eq!(
            gen_observations(&th, t.clone(), 4).unwrap(),
            gen_observations(&th, t, 4).unwrap()
        );
    }

    #[test]
    fn noiseless_observations_are_exact() {
        let th = Theta::new(2.0, 0.5, 0.0);
        let t = gen_temperatures(&uniform(), 100, 1);
        let d = gen_observations(&th, t, 2).unwrap();
        assert!(d.iter().all(|(t, x)| x == th.mean(t)));
    }

    #[test]
    fn noise_moments() {
        let n = 100_000;
        let th = Theta::new(2.0, 0.5, 0.25);
        let t = gen_temperatures(&uniform(), n, 1);
        let d = gen_observations(&th, t, 2).unwrap();
        let r: Vec<f64> = d.iter().map(|(t, x)| x - th.mean(t)).collect();
        let m = mean(&r);
        assert!(m.abs() < 4.0 * 0.5 / (n as f64).sqrt());
        let var = r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / 0.25 - 1.0).abs() < 0.05);
    }

    #[test]
    fn periodic_design_is_a_distribution() {
        let d = PeriodicDesign::equispaced(Domain::unit(), 16, 0.02).unwrap();
        let mass = d.integrate_below(|_| 1.0, 1.0, &[]).unwrap();
        assert!((mass - 1.0).abs() < 1e-9);
        // The first point sits 1.56 sd from the lower edge, so a clamped atom exists.
        let atom = d.integrate_below(|_| 1.0, 1e-300, &[]).unwrap();
        let expected = (normal_cdf(-0.03125 / 0.02) - normal_cdf(-3.0))
            / PeriodicDesign::truncation_mass()
            / 16.0;
        assert!((atom - expected).abs() < 1e-9);
        // Against the empirical distribution of a long simulated sequence.
        let t = gen_temperatures(&TemperatureDesign::Periodic(d.clone()), 160_000, 4);
        let emp = t.iter().filter(|&&v| v <= 0.5).count() as f64 / t.len() as f64;
        let f = d.integrate_below(|_| 1.0, 0.5, &[]).unwrap();
        assert!((emp - f).abs() < 0.005);
    }

    #[test]
    fn slope_of_exact_power_law() {
        let ns = [200, 500, 1000, 2000];
        let med: Vec<f64> = ns.iter().map(|&n| 3.0 * (n as f64).powf(-0.5)).collect();
        assert!((slope_of(&ns, &med).unwrap() + 0.5).abs() < 1e-12);
        let med: Vec<f64> = ns
            .iter()
            .map(|&n| (n as f64).powf(-0.5) * (n as f64).ln())
            .collect();
        let s = slope_of(&ns, &med).unwrap();
        assert!(s > -0.5 && s < -0.3, "{s}");
        assert!(slope_of(&ns[..2], &med[..2]).is_err());
    }

    #[test]
    fn quantiles() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!((quantile(&[0.0, 10.0], 0.9) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn normality_self_test() {
        // Synthetic N(0, I^{-1}) draws through the Cholesky factor of I^{-1}.
        let info =
            InfoMatrix::from_upper([[1.0 / 6.0, 1.0, 0.0], [0.0, 8.0, 0.0], [0.0, 0.0, 8.0]]);
        let cov = info.inverse().unwrap();
        let l = cov.cholesky().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draw = |rng: &mut ChaCha8Rng| {
            let z = [std_normal(rng), std_normal(rng), std_normal(rng)];
            std::array::from_fn(|i| (0..3).map(|j| l[i][j] * z[j]).sum::<f64>())
        };
        let small: Vec<[f64; 3]> = (0..500).map(|_| draw(&mut rng)).collect();
        let large: Vec<[f64; 3]> = (0..50_000).map(|_| draw(&mut rng)).collect();
        let ds = normality_from_samples(&small, &cov, 1);
        let dl = normality_from_samples(&large, &cov, 1);
        assert!(dl.rel_frobenius < ds.rel_frobenius.max(0.02));
        assert!(dl.rel_frobenius < 0.03);
        // 40 batches of 500: each coordinate should pass the 5% KS critical
        // value in at least 95% of batches, so 34 or more (3 sd margin).
        let crit = 1.36 / 500f64.sqrt();
        let mut passes = [0usize; 3];
        for _ in 0..40 {
            let batch: Vec<[f64; 3]> = (0..500).map(|_| draw(&mut rng)).collect();
            let d = normality_from_samples(&batch, &cov, 1);
            for k in 0..3 {
                passes[k] += (d.ks[k] < crit) as usize;
            }
        }
        assert!(passes.iter().all(|&p| p >= 34), "{passes:?}");
    }
}
