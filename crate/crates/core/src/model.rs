// SPDX-License-Identifier: MIT OR Apache-2.0

//! The two-phase continuous regression model
//! `x = gamma * (t - u) * 1{t <= u} + noise`, its Gaussian log-likelihood,
//! empirical and limiting temperature distributions, and the
//! Kullback–Leibler-type discrepancies between parameter values.

use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dist::{normal_cdf, normal_pdf, normal_quantile};
use crate::error::{invalid, precondition, Error, Result};
use crate::quad::{integrate_split, DEFAULT_ABS_TOL};

/// Model parameter `(gamma, u, sigma2)`.
///
/// `gamma` is the slope of the left phase, `u` the breakpoint and `sigma2`
/// the Gaussian noise variance. Fields are public; use [`Theta::validate`]
/// against a [`Domain`] where identifiability matters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub gamma: f64,
    pub u: f64,
    pub sigma2: f64,
}

impl Theta {
    pub const fn new(gamma: f64, u: f64, sigma2: f64) -> Self {
        Self { gamma, u, sigma2 }
    }

    /// Regression part `(gamma, u)`.
    pub fn eta(&self) -> (f64, f64) {
        (self.gamma, self.u)
    }

    /// Intercept of the left phase, `beta = -gamma * u`.
    pub fn beta(&self) -> f64 {
        -self.gamma * self.u
    }

    /// `(beta, gamma)`: the left phase written as `beta + gamma * t`.
    pub fn tau(&self) -> (f64, f64) {
        (self.beta(), self.gamma)
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.gamma, self.u, self.sigma2]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Regression mean at temperature `t`.
    pub fn mean(&self, t: f64) -> f64 {
        mu(self.gamma, self.u, t)
    }

    /// True when `gamma != 0`, `sigma2 > 0` and `u` lies strictly inside the domain.
    pub fn is_identifiable(&self, domain: &Domain) -> bool {
        self.validate(domain).is_ok()
    }

    pub fn validate(&self, domain: &Domain) -> Result<()> {
        if !(self.gamma.is_finite() && self.u.is_finite() && self.sigma2.is_finite()) {
            return Err(invalid(format!("non-finite parameter {self:?}")));
        }
        if self.sigma2 <= 0.0 {
            return Err(precondition(format!(
                "sigma2 must be positive, got {}",
                self.sigma2
            )));
        }
        if !domain.interior(self.u) {
            return Err(precondition(format!(
                "breakpoint u = {} outside the open domain ({}, {})",
                self.u, domain.lower, domain.upper
            )));
        }
        if self.gamma == 0.0 {
            return Err(precondition("gamma = 0 is not identifiable"));
        }
        Ok(())
    }

    pub fn distance(&self, other: &Theta) -> f64 {
        let a = self.to_array();
        let b = other.to_array();
        a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

/// Compact temperature support `[lower, upper]`; breakpoints live in the
/// open interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub lower: f64,
    pub upper: f64,
}

impl Domain {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        let d = Self { lower, upper };
        d.check()?;
        Ok(d)
    }

    pub fn unit() -> Self {
        Self {
            lower: 0.0,
            upper: 1.0,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper) {
            return Err(invalid(format!(
                "domain requires lower < upper, got [{}, {}]",
                self.lower, self.upper
            )));
        }
        Ok(())
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.lower && t <= self.upper
    }

    pub fn interior(&self, u: f64) -> bool {
        u > self.lower && u < self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

/// Observed `(t, x)` pairs, kept sorted by temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    t: Vec<f64>,
    x: Vec<f64>,
}

impl Dataset {
    /// Builds a dataset, sorting the pairs by temperature (stable for ties).
    pub fn new(t: Vec<f64>, x: Vec<f64>) -> Result<Self> {
        if t.len() != x.len() {
            return Err(invalid(format!(
                "temperature and response lengths differ ({} vs {})",
                t.len(),
                x.len()
            )));
        }
        if t.is_empty() {
            return Err(invalid("dataset needs at least one observation"));
        }
        if let Some(i) = t
            .iter()
            .zip(&x)
            .position(|(a, b)| !a.is_finite() || !b.is_finite())
        {
            return Err(invalid(format!("observation {i} is not finite")));
        }
        let sorted = t.windows(2).all(|w| w[0] <= w[1]);
        if sorted {
            return Ok(Self { t, x });
        }
        let mut idx: Vec<usize> = (0..t.len()).collect();
        idx.sort_by(|&a, &b| t[a].total_cmp(&t[b]));
        Ok(Self {
            t: idx.iter().map(|&i| t[i]).collect(),
            x: idx.iter().map(|&i| x[i]).collect(),
        })
    }

    /// As [`Dataset::new`], additionally checking every temperature lies in `domain`.
    pub fn with_domain(t: Vec<f64>, x: Vec<f64>, domain: &Domain) -> Result<Self> {
        let d = Self::new(t, x)?;
        d.check_domain(domain)?;
        Ok(d)
    }

    pub fn check_domain(&self, domain: &Domain) -> Result<()> {
        domain.check()?;
        let (lo, hi) = (self.t[0], self.t[self.t.len() - 1]);
        if !domain.contains(lo) || !domain.contains(hi) {
            return Err(precondition(format!(
                "temperatures span [{lo}, {hi}], outside the domain [{}, {}]",
                domain.lower, domain.upper
            )));
        }
        Ok(())
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.t.iter().copied().zip(self.x.iter().copied())
    }

    /// Number of observations with `t_i <= u`.
    pub fn active_count(&self, u: f64) -> usize {
        self.t.partition_point(|&t| t <= u)
    }

    pub fn sum_sq_x(&self) -> f64 {
        self.x.iter().map(|v| v * v).sum()
    }

    /// True when `u` equals one of the observed temperatures.
    pub fn is_knot(&self, u: f64) -> bool {
        self.t.binary_search_by(|t| t.total_cmp(&u)).is_ok()
    }

    /// Keeps the observations selected by `keep`, preserving order.
    pub(crate) fn filtered<F: Fn(f64) -> bool>(&self, keep: F) -> Option<Self> {
        let (t, x): (Vec<f64>, Vec<f64>) = self.iter().filter(|&(t, _)| keep(t)).unzip();
        if t.is_empty() {
            None
        } else {
            Some(Self { t, x })
        }
    }

    /// Reads a `t,x` CSV. Rows may come in any order; errors carry line numbers.
    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_csv_reader(file, path)
    }

    pub fn from_csv_reader<R: Read>(reader: R, origin: &Path) -> Result<Self> {
        let csv_err = |line: u64, message: String| Error::Csv {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| csv_err(1, e.to_string()))?
            .clone();
        if headers.len() != 2 || &headers[0] != "t" || &headers[1] != "x" {
            return Err(csv_err(
                1,
                format!(
                    "expected header `t,x`, found `{}`",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            ));
        }
        let mut t = Vec::new();
        let mut x = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                csv_err(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let field = |k: usize, name: &str| -> Result<f64> {
                let raw = &record[k];
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        csv_err(
                            line,
                            format!("column `{name}`: `{raw}` is not a finite number"),
                        )
                    })
            };
            t.push(field(0, "t")?);
            x.push(field(1, "x")?);
        }
        if t.is_empty() {
            return Err(csv_err(1, "no observations".into()));
        }
        Self::new(t, x)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["t", "x"]).map_err(io)?;
        for (t, x) in self.iter() {
            w.write_record([t.to_string(), x.to_string()]).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Integration against a temperature distribution on a compact domain.
///
/// Implemented by [`LimitDesign`] and by designs with atoms (e.g. clamped
/// periodic designs in the simulation module).
pub trait Design {
    fn domain(&self) -> Domain;

    /// `∫_{lower}^{upto} h(t) dF(t)`, with `kinks` marking points where `h`
    /// is not smooth.
    fn integrate_below<H: Fn(f64) -> f64>(&self, h: H, upto: f64, kinks: &[f64]) -> Result<f64>;

    /// Density of the continuous part at `t`.
    fn density(&self, t: f64) -> f64;
}

/// Limiting temperature distribution with a continuous density on its domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LimitDesign {
    Uniform {
        domain: Domain,
    },
    TruncatedNormal {
        domain: Domain,
        loc: f64,
        scale: f64,
    },
}

impl LimitDesign {
    pub fn uniform(domain: Domain) -> Self {
        Self::Uniform { domain }
    }

    pub fn truncated_normal(domain: Domain, loc: f64, scale: f64) -> Result<Self> {
        let d = Self::TruncatedNormal { domain, loc, scale };
        d.check()?;
        Ok(d)
    }

    pub fn check(&self) -> Result<()> {
        self.domain().check()?;
        if let Self::TruncatedNormal { loc, scale, .. } = *self {
            if !(loc.is_finite() && scale.is_finite() && scale > 0.0) {
                return Err(invalid(format!(
                    "truncated normal needs finite loc and scale > 0, got ({loc}, {scale})"
                )));
            }
            let mass = self.normal_mass();
            if mass.2 <= 0.0 {
                return Err(invalid("truncated normal has no mass on the domain"));
            }
        }
        Ok(())
    }

    // (Phi(alpha), Phi(beta), Phi(beta) - Phi(alpha)) for the truncated normal.
    fn normal_mass(&self) -> (f64, f64, f64) {
        match *self {
            Self::TruncatedNormal { domain, loc, scale } => {
                let a = normal_cdf((domain.lower - loc) / scale);
                let b = normal_cdf((domain.upper - loc) / scale);
                (a, b, b - a)
            }
            Self::Uniform { .. } => (0.0, 1.0, 1.0),
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        let d = self.domain();
        if t <= d.lower {
            return 0.0;
        }
        if t >= d.upper {
            return 1.0;
        }
        match *self {
            Self::Uniform { domain } => (t - domain.lower) / domain.width(),
            Self::TruncatedNormal { loc, scale, .. } => {
                let (a, _, z) = self.normal_mass();
                ((normal_cdf((t - loc) / scale) - a) / z).clamp(0.0, 1.0)
            }
        }
    }

    pub fn pdf(&self, t: f64) -> f64 {
        let d = self.domain();
        if t < d.lower || t > d.upper {
            return 0.0;
        }
        match *self {
            Self::Uniform { domain } => 1.0 / domain.width(),
            Self::TruncatedNormal { loc, scale, .. } => {
                let (_, _, z) = self.normal_mass();
                normal_pdf((t - loc) / scale) / (scale * z)
            }
        }
    }

    /// Inverse CDF on `[0, 1]`.
    pub fn quantile(&self, p: f64) -> f64 {
        let d = self.domain();
        let p = p.clamp(0.0, 1.0);
        let t = match *self {
            Self::Uniform { domain } => domain.lower + p * domain.width(),
            Self::TruncatedNormal { loc, scale, .. } => {
                let (a, _, z) = self.normal_mass();
                loc + scale * normal_quantile(a + p * z)
            }
        };
        t.clamp(d.lower, d.upper)
    }
}

impl Design for LimitDesign {
    fn domain(&self) -> Domain {
        match *self {
            Self::Uniform { domain } | Self::TruncatedNormal { domain, .. } => domain,
        }
    }

    fn integrate_below<H: Fn(f64) -> f64>(&self, h: H, upto: f64, kinks: &[f64]) -> Result<f64> {
        let d = self.domain();
        let upto = upto.clamp(d.lower, d.upper);
        integrate_split(
            |t| h(t) * self.pdf(t),
            d.lower,
            upto,
            kinks,
            DEFAULT_ABS_TOL,
        )
    }

    fn density(&self, t: f64) -> f64 {
        self.pdf(t)
    }
}

/// Regression mean `gamma * (t - u)` for `t <= u`, zero otherwise.
pub fn mu(gamma: f64, u: f64, t: f64) -> f64 {
    if t <= u {
        gamma * (t - u)
    } else {
        0.0
    }
}

/// Per-observation log-likelihood terms.
pub fn log_likelihood_terms(theta: &Theta, data: &Dataset) -> Result<Vec<f64>> {
    check_variance(theta.sigma2)?;
    let c = -0.5 * (2.0 * PI * theta.sigma2).ln();
    Ok(data
        .iter()
        .map(|(t, x)| {
            let r = x - theta.mean(t);
            c - r * r / (2.0 * theta.sigma2)
        })
        .collect())
}

/// Gaussian log-likelihood of the whole dataset.
pub fn log_likelihood(theta: &Theta, data: &Dataset) -> Result<f64> {
    check_variance(theta.sigma2)?;
    let n = data.len() as f64;
    let rss: f64 = data
        .iter()
        .map(|(t, x)| {
            let r = x - theta.mean(t);
            r * r
        })
        .sum();
    Ok(-0.5 * n * (2.0 * PI * theta.sigma2).ln() - rss / (2.0 * theta.sigma2))
}

fn check_variance(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(precondition(format!(
            "variance must be positive and finite, got {sigma2}"
        )))
    }
}

/// Right-continuous empirical CDF of the temperatures.
#[derive(Clone, Debug)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    /// `#{i : t_i <= u} / n`.
    pub fn eval(&self, u: f64) -> f64 {
        self.sorted.partition_point(|&t| t <= u) as f64 / self.sorted.len() as f64
    }
}

pub fn ecdf(data: &Dataset) -> Ecdf {
    Ecdf {
        sorted: data.t().to_vec(),
    }
}

/// `max_j |F_n(u_j) - F(u_j)|` over `grid_size` equispaced points spanning the domain.
pub fn sup_cdf_deviation(data: &Dataset, design: &LimitDesign, grid_size: usize) -> Result<f64> {
    if grid_size < 2 {
        return Err(precondition("grid_size must be at least 2"));
    }
    let d = design.domain();
    let f_n = ecdf(data);
    let step = d.width() / (grid_size - 1) as f64;
    Ok((0..grid_size)
        .map(|j| {
            let u = if j + 1 == grid_size {
                d.upper
            } else {
                d.lower + j as f64 * step
            };
            (f_n.eval(u) - design.cdf(u)).abs()
        })
        .fold(0.0, f64::max))
}

fn variance_discrepancy(sigma2: f64, sigma2_0: f64) -> Result<f64> {
    check_variance(sigma2)?;
    check_variance(sigma2_0)?;
    let ratio = sigma2_0 / sigma2;
    // ratio - 1 - ln(ratio), computed without cancellation near ratio = 1.
    Ok((ratio - 1.0) - (ratio - 1.0).ln_1p())
}

/// Empirical discrepancy `b_n(theta)` between `theta` and the truth `theta0`
/// on the observed design. Always non-negative.
pub fn discrepancy_b_n(theta: &Theta, theta0: &Theta, data: &Dataset) -> Result<f64> {
    let var_part = variance_discrepancy(theta.sigma2, theta0.sigma2)?;
    let n = data.len() as f64;
    let mean_part: f64 = data
        .t()
        .iter()
        .map(|&t| {
            let d = theta0.mean(t) - theta.mean(t);
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(var_part + mean_part / theta.sigma2)
}

/// Population discrepancy `b(theta)`: the design-integrated analogue of
/// [`discrepancy_b_n`]. Zero exactly when `theta == theta0` (for `gamma0 != 0`
/// and a positive design density).
pub fn discrepancy_b<D: Design>(theta: &Theta, theta0: &Theta, design: &D) -> Result<f64> {
    let var_part = variance_discrepancy(theta.sigma2, theta0.sigma2)?;
    let upto = theta.u.max(theta0.u);
    let mean_part = design.integrate_below(
        |t| {
            let d = theta0.mean(t) - theta.mean(t);
            d * d
        },
        upto,
        &[theta.u, theta0.u],
    )?;
    Ok(var_part + mean_part / theta.sigma2)
}
