// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end: `fit`, `posterior` and `study`.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 the fit
//! carries a degeneracy flag, 3 `study --check` found threshold violations.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::estimate::{fit_mle, FitResult};
use crate::fisher::{empirical_information, wald_interval, InfoSource};
use crate::model::{Dataset, Domain, LimitDesign, Theta};
use crate::posterior::{
    bayes_estimator, bvm_l1_u, default_u_grid, sample_posterior, u_marginal_log_posterior,
    write_draws_csv, NigPrior, Prior, UPrior,
};
use crate::pseudo::WindowRule;
use crate::simulate::{
    check_acceptance, run_study, PeriodicDesign, Pipeline, Scenario, TemperatureDesign,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_FLAGGED: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "twophase",
    version,
    about = "Two-phase linear regression with an unknown breakpoint"
)]
pub struct Cli {
    /// Seed for every stochastic output (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for studies (overrides the config; 0 = all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Main output file; stdout when absent.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Maximum-likelihood fit of a `t,x` CSV file.
    Fit(FitArgs),
    /// Exact grid posterior of a `t,x` CSV file.
    Posterior(PosteriorArgs),
    /// Monte Carlo study described by a config file.
    Study(StudyArgs),
}

#[derive(Args, Debug)]
pub struct DomainArgs {
    /// Lower end of the temperature domain (default: smallest t).
    #[arg(long, allow_negative_numbers = true)]
    pub lower: Option<f64>,
    /// Upper end of the temperature domain (default: largest t).
    #[arg(long, allow_negative_numbers = true)]
    pub upper: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    pub csv: PathBuf,
    #[command(flatten)]
    pub domain: DomainArgs,
    /// Confidence level of the Wald intervals.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
}

#[derive(Args, Debug)]
pub struct PosteriorArgs {
    pub csv: PathBuf,
    /// TOML config with `[domain]`, `[prior]` and `[output]` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub domain: DomainArgs,
    /// Number of exact posterior draws to write.
    #[arg(long, default_value_t = 0)]
    pub draws: usize,
    /// Where to write the u-grid CSV (default: `<output>.grid.csv`).
    #[arg(long)]
    pub grid_csv: Option<PathBuf>,
    /// Where to write the draws CSV (default: `<output>.draws.csv`).
    #[arg(long)]
    pub draws_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StudyArgs {
    pub config: PathBuf,
    /// Evaluate the acceptance thresholds; exit 3 on any violation.
    #[arg(long)]
    pub check: bool,
    /// Per-replicate CSV.
    #[arg(long)]
    pub records_csv: Option<PathBuf>,
}

// ---------------------------------------------------------------- config

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub domain: Option<DomainConfig>,
    pub prior: Option<PriorConfig>,
    pub window: Option<WindowRule>,
    pub output: Option<OutputConfig>,
    pub study: Option<StudyConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    #[serde(default = "default_u_prior")]
    pub u: UPrior,
    #[serde(default = "default_m0")]
    pub m0: f64,
    #[serde(default = "default_k0")]
    pub k0: f64,
    #[serde(default = "default_a0")]
    pub a0: f64,
    #[serde(default = "default_b0")]
    pub b0: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        let NigPrior { m0, k0, a0, b0 } = NigPrior::default();
        Self {
            u: UPrior::Uniform,
            m0,
            k0,
            a0,
            b0,
        }
    }
}

fn default_u_prior() -> UPrior {
    UPrior::Uniform
}
fn default_m0() -> f64 {
    NigPrior::default().m0
}
fn default_k0() -> f64 {
    NigPrior::default().k0
}
fn default_a0() -> f64 {
    NigPrior::default().a0
}
fn default_b0() -> f64 {
    NigPrior::default().b0
}

impl PriorConfig {
    pub fn build(&self, domain: Domain) -> Result<Prior> {
        Prior::new(
            self.u,
            NigPrior {
                m0: self.m0,
                k0: self.k0,
                a0: self.a0,
                b0: self.b0,
            },
            domain,
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub report: Option<PathBuf>,
    pub records_csv: Option<PathBuf>,
    pub grid_csv: Option<PathBuf>,
    pub draws_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub theta0: Theta,
    pub design: DesignConfig,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    #[serde(default = "default_outputs")]
    pub outputs: BTreeSet<Pipeline>,
    #[serde(default = "default_level")]
    pub wald_level: f64,
}

fn default_name() -> String {
    "study".into()
}
fn default_outputs() -> BTreeSet<Pipeline> {
    [Pipeline::Mle, Pipeline::Posterior, Pipeline::Pseudo].into()
}
fn default_level() -> f64 {
    0.95
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignConfig {
    Uniform,
    TruncatedNormal {
        loc: f64,
        scale: f64,
    },
    /// `pattern` defaults to `period` equispaced cell midpoints.
    Periodic {
        period: Option<usize>,
        pattern: Option<Vec<f64>>,
        #[serde(default)]
        jitter_sd: f64,
    },
}

impl DesignConfig {
    pub fn build(&self, domain: Domain) -> Result<TemperatureDesign> {
        let d = match self {
            DesignConfig::Uniform => TemperatureDesign::Iid(LimitDesign::uniform(domain)),
            DesignConfig::TruncatedNormal { loc, scale } => {
                TemperatureDesign::Iid(LimitDesign::truncated_normal(domain, *loc, *scale)?)
            }
            DesignConfig::Periodic {
                period,
                pattern,
                jitter_sd,
            } => {
                let design = match (pattern, period) {
                    (Some(p), per) => {
                        if per.is_some_and(|k| k != p.len()) {
                            return Err(Error::Config(
                                "period differs from the pattern length".into(),
                            ));
                        }
                        PeriodicDesign {
                            domain,
                            pattern: p.clone(),
                            jitter_sd: *jitter_sd,
                        }
                    }
                    (None, Some(k)) => PeriodicDesign::equispaced(domain, *k, *jitter_sd)?,
                    (None, None) => {
                        return Err(Error::Config(
                            "periodic design needs period or pattern".into(),
                        ))
                    }
                };
                design.check()?;
                TemperatureDesign::Periodic(design)
            }
        };
        Ok(d)
    }
}

impl Config {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn domain_or(&self, fallback: Domain) -> Result<Domain> {
        match self.domain {
            Some(DomainConfig { lower, upper }) => Domain::new(lower, upper),
            None => Ok(fallback),
        }
    }

    /// Everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        let domain = self.domain_or(Domain::unit())?;
        self.prior.unwrap_or_default().build(domain)?;
        if let Some(w) = &self.window {
            w.check()?;
        }
        if self.study.is_some() {
            self.scenario()?;
        }
        Ok(())
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let study = self
            .study
            .as_ref()
            .ok_or_else(|| Error::Config("missing [study] section".into()))?;
        let domain = self.domain_or(Domain::unit())?;
        let scenario = Scenario {
            name: study.name.clone(),
            theta0: study.theta0,
            design: study.design.build(domain)?,
            n_grid: study.n_grid.clone(),
            replicates: study.replicates,
            seed: self.seed.unwrap_or(Scenario::reference().seed),
            prior: self.prior.unwrap_or_default().build(domain)?,
            window_rule: self.window.unwrap_or_default(),
            outputs: study.outputs.clone(),
            wald_level: study.wald_level,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

// ---------------------------------------------------------------- output

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and an atomic rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => atomic_write(p, text.as_bytes()),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.write_all(b"\n")?;
            Ok(())
        }
    }
}

fn sibling(output: Option<&Path>, suffix: &str) -> Option<PathBuf> {
    output.map(|p| {
        let mut s = p.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    })
}

fn finite(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn theta_json(t: &Theta) -> Value {
    json!({ "gamma": t.gamma, "u": t.u, "sigma2": t.sigma2 })
}

fn data_domain(data: &Dataset, args: &DomainArgs, config: Option<&Config>) -> Result<Domain> {
    let t = data.t();
    let (mut lower, mut upper) = (t[0], t[t.len() - 1]);
    if let Some(DomainConfig { lower: l, upper: u }) = config.and_then(|c| c.domain) {
        lower = l;
        upper = u;
    }
    lower = args.lower.unwrap_or(lower);
    upper = args.upper.unwrap_or(upper);
    let d = Domain::new(lower, upper)?;
    data.check_domain(&d)?;
    Ok(d)
}

/// JSON document of a fit, with Wald intervals when the fit is clean.
pub fn fit_json(fit: &FitResult, data: &Dataset, domain: &Domain, level: f64) -> Result<Value> {
    let intervals = if fit.is_flagged() {
        Value::Null
    } else {
        let iv = wald_interval(fit, InfoSource::Empirical(data), level)?;
        json!({
            "gamma": [iv[0].lower, iv[0].upper],
            "u": [iv[1].lower, iv[1].upper],
            "sigma2": [iv[2].lower, iv[2].upper],
        })
    };
    Ok(json!({
        "theta_hat": theta_json(&fit.theta_hat),
        "rss": fit.rss,
        "loglik": finite(fit.loglik),
        "n": fit.n,
        "active_count": fit.active_count,
        "domain": { "lower": domain.lower, "upper": domain.upper },
        "level": level,
        "intervals": intervals,
        "flags": fit.flags.iter().map(|f| f.to_string()).collect::<Vec<_>>(),
    }))
}

fn cmd_fit(cli: &Cli, args: &FitArgs) -> Result<i32> {
    let data = Dataset::from_csv_path(&args.csv)?;
    let domain = data_domain(&data, &args.domain, None)?;
    let fit = fit_mle(&data, &domain)?;
    let doc = fit_json(&fit, &data, &domain, args.level)?;
    emit(
        cli.output.as_deref(),
        &serde_json::to_string_pretty(&doc).expect("json"),
    )?;
    Ok(if fit.is_flagged() {
        EXIT_FLAGGED
    } else {
        EXIT_OK
    })
}

fn cmd_posterior(cli: &Cli, args: &PosteriorArgs) -> Result<i32> {
    let config = match &args.config {
        Some(p) => Config::from_path(p)?,
        None => Config::default(),
    };
    let data = Dataset::from_csv_path(&args.csv)?;
    let domain = data_domain(&data, &args.domain, Some(&config))?;
    let prior = config.prior.unwrap_or_default().build(domain)?;
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let out_cfg = config.output.clone().unwrap_or_default();

    let fit = fit_mle(&data, &domain)?;
    let nodes = default_u_grid(&data, &fit, &domain);
    let grid = u_marginal_log_posterior(&data, &prior, &nodes)?;
    let summary = bayes_estimator(&grid, &data, &prior)?;
    // Outside simulation theta0 is unknown; the target uses the empirical
    // information at the MLE.
    let bvm = if fit.is_flagged() {
        None
    } else {
        let info = empirical_information(&fit.theta_hat, &data)?;
        Some(bvm_l1_u(&grid, &fit, &info, data.len())?)
    };

    let output = cli.output.as_deref();
    let grid_path = args
        .grid_csv
        .clone()
        .or(out_cfg.grid_csv)
        .or_else(|| sibling(output, ".grid.csv"));
    if let Some(p) = &grid_path {
        let mut buf = Vec::new();
        grid.write_csv(&mut buf)?;
        atomic_write(p, &buf)?;
    }
    let mut draws_path = None;
    if args.draws > 0 {
        let draws = sample_posterior(&grid, &data, &prior, args.draws, seed)?;
        let p = args
            .draws_csv
            .clone()
            .or(out_cfg.draws_csv)
            .or_else(|| sibling(output, ".draws.csv"))
            .ok_or_else(|| Error::InvalidInput("--draws needs --draws-csv or --output".into()))?;
        let mut buf = Vec::new();
        write_draws_csv(&draws, &mut buf)?;
        atomic_write(&p, &buf)?;
        draws_path = Some(p);
    }

    let doc = json!({
        "theta_bayes": theta_json(&summary.theta_bayes),
        "posterior_sd": { "gamma": summary.sd[0], "u": summary.sd[1], "sigma2": summary.sd[2] },
        "theta_hat": theta_json(&fit.theta_hat),
        "bvm_l1_u": bvm,
        "max_moment_order": prior.max_moment_order(),
        "grid_nodes": grid.len(),
        "grid_csv": grid_path.map(|p| p.display().to_string()),
        "draws": args.draws,
        "draws_csv": draws_path.map(|p| p.display().to_string()),
        "seed": seed,
        "flags": fit.flags.iter().map(|f| f.to_string()).collect::<Vec<_>>(),
    });
    emit(output, &serde_json::to_string_pretty(&doc).expect("json"))?;
    Ok(if fit.is_flagged() {
        EXIT_FLAGGED
    } else {
        EXIT_OK
    })
}

fn cmd_study(cli: &Cli, args: &StudyArgs) -> Result<i32> {
    let config = Config::from_path(&args.config)?;
    let mut scenario = config.scenario()?;
    if let Some(seed) = cli.seed {
        scenario.seed = seed;
    }
    let workers = cli.workers.or(config.workers).unwrap_or(0);
    let out_cfg = config.output.clone().unwrap_or_default();
    let report = run_study(&scenario, workers)?;

    let report_path = cli.output.clone().or(out_cfg.report);
    emit(report_path.as_deref(), &report.to_json()?)?;
    if let Some(p) = args.records_csv.clone().or(out_cfg.records_csv) {
        let mut buf = Vec::new();
        report.write_records_csv(&mut buf)?;
        atomic_write(&p, &buf)?;
    }

    // Keep stdout clean when it carries the report.
    let mut screen: Box<dyn Write> = if report_path.is_some() {
        Box::new(std::io::stdout())
    } else {
        Box::new(std::io::stderr())
    };
    write!(screen, "{}", report.summary_table())?;
    if args.check {
        let checks = check_acceptance(&report);
        for c in &checks {
            writeln!(
                screen,
                "{} {}: {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        if checks.iter().any(|c| !c.passed) {
            return Ok(EXIT_CHECK);
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Fit(a) => cmd_fit(&cli, a),
        Command::Posterior(a) => cmd_posterior(&cli, a),
        Command::Study(a) => cmd_study(&cli, a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
    }
}
