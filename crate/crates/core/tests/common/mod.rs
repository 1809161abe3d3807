// SPDX-License-Identifier: MIT OR Apache-2.0

//! Invariant checkers shared by the property suite and the acceptance run.
//! Each returns `Err(description)` on violation so callers can report it.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twophase::estimate::{fit_mle, profile_fit_at};
use twophase::fisher::{asymptotic_information, InfoMatrix};
use twophase::model::{
    discrepancy_b, discrepancy_b_n, log_likelihood, mu, Dataset, Design, Domain, LimitDesign, Theta,
};
use twophase::posterior::{bvm_l1_u, default_u_grid, u_marginal_log_posterior, Prior};
use twophase::pseudo::{pseudo_delete, WindowRule};
use twophase::simulate::{gen_observations_with, run_replicate, run_study, Scenario, StudyReport};

pub type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Random data with uniform temperatures on `domain`.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, theta: &Theta, domain: &Domain) -> Dataset {
    let t: Vec<f64> = (0..n)
        .map(|_| rng.random_range(domain.lower..=domain.upper))
        .collect();
    gen_observations_with(theta, t, rng).expect("valid generator input")
}

pub fn random_theta(rng: &mut ChaCha8Rng, domain: &Domain) -> Theta {
    let mut gamma = rng.random_range(-3.0..3.0);
    if f64::abs(gamma) < 0.2 {
        gamma = 0.2f64.copysign(gamma);
    }
    let u = domain.lower + domain.width() * rng.random_range(0.1..0.9);
    Theta::new(gamma, u, rng.random_range(0.01..1.0))
}

pub fn mu_continuity(gamma: f64, u: f64, eps: f64) -> Check {
    let jump = (mu(gamma, u, u - eps) - mu(gamma, u, u + eps)).abs();
    ensure(jump <= gamma.abs() * eps * (1.0 + 1e-12) + 1e-300, || {
        format!(
            "mu jump {jump} at u = {u} exceeds |gamma| eps = {}",
            gamma.abs() * eps
        )
    })
}

/// `perm` is an arbitrary reordering of `0..data.len()`.
pub fn loglik_permutation(theta: &Theta, data: &Dataset, perm: &[usize]) -> Check {
    let t: Vec<f64> = perm.iter().map(|&i| data.t()[i]).collect();
    let x: Vec<f64> = perm.iter().map(|&i| data.x()[i]).collect();
    let shuffled = Dataset::new(t, x).map_err(|e| e.to_string())?;
    let a = log_likelihood(theta, data).map_err(|e| e.to_string())?;
    let b = log_likelihood(theta, &shuffled).map_err(|e| e.to_string())?;
    ensure((a - b).abs() <= 1e-12 * (1.0 + a.abs()), || {
        format!("loglik {a} vs {b} after permutation")
    })
}

pub fn b_n_nonnegative(theta: &Theta, theta0: &Theta, data: &Dataset) -> Check {
    let b = discrepancy_b_n(theta, theta0, data).map_err(|e| e.to_string())?;
    ensure(b >= 0.0, || format!("b_n = {b} < 0 at {theta:?}"))
}

pub fn b_zero_at_truth<D: Design>(theta0: &Theta, design: &D) -> Check {
    let b = discrepancy_b(theta0, theta0, design).map_err(|e| e.to_string())?;
    ensure(b == 0.0, || format!("b(theta0, theta0) = {b}"))
}

pub fn b_positive_off_truth<D: Design>(theta: &Theta, theta0: &Theta, design: &D) -> Check {
    if theta == theta0 {
        return Ok(());
    }
    let b = discrepancy_b(theta, theta0, design).map_err(|e| e.to_string())?;
    ensure(b > 0.0, || format!("b = {b} at {theta:?} != theta0"))
}

/// `sup_t |mu(eta, t) - mu(eta', t)| <= C |eta - eta'|` over a dense grid, with
/// `C = width + max|gamma| + max|u|` for the box `[-g_max, g_max] x domain`.
pub fn mu_lipschitz(a: (f64, f64), b: (f64, f64), g_max: f64, domain: &Domain) -> Check {
    let c = domain.width() + g_max + domain.lower.abs().max(domain.upper.abs());
    let dist = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let sup = (0..=4000)
        .map(|i| domain.lower + domain.width() * i as f64 / 4000.0)
        .map(|t| (mu(a.0, a.1, t) - mu(b.0, b.1, t)).abs())
        .fold(0.0, f64::max);
    ensure(sup <= c * dist * (1.0 + 1e-12), || {
        format!("sup {sup} > C |d| = {}", c * dist)
    })
}

pub fn profile_identity(data: &Dataset, u: f64, domain: &Domain) -> Check {
    let p = profile_fit_at(u, data, domain).map_err(|e| e.to_string())?;
    let g = p.gamma_hat.unwrap_or(0.0);
    let direct: f64 = data
        .iter()
        .map(|(t, x)| {
            let r = x - if t <= u { g * (t - u) } else { 0.0 };
            r * r
        })
        .sum();
    ensure((p.rss - direct).abs() <= 1e-9 * direct.max(1e-300), || {
        format!("profile rss {} vs direct {direct} at u = {u}", p.rss)
    })
}

pub fn global_optimality(data: &Dataset, domain: &Domain, us: &[f64]) -> Check {
    let fit = fit_mle(data, domain).map_err(|e| e.to_string())?;
    for &u in us {
        let p = profile_fit_at(u, data, domain).map_err(|e| e.to_string())?;
        ensure(fit.rss <= p.rss * (1.0 + 1e-12) + 1e-300, || {
            format!("fit rss {} above profile rss {} at u = {u}", fit.rss, p.rss)
        })?;
    }
    Ok(())
}

/// Adding `(t, x)` cannot lower the best rss, and raises it by at most the
/// new point's squared residual under the old fit.
pub fn monotone_growth(data: &Dataset, t: f64, x: f64, domain: &Domain) -> Check {
    let old = fit_mle(data, domain).map_err(|e| e.to_string())?;
    let mut ts = data.t().to_vec();
    let mut xs = data.x().to_vec();
    ts.push(t);
    xs.push(x);
    let grown = Dataset::new(ts, xs).map_err(|e| e.to_string())?;
    let new = fit_mle(&grown, domain).map_err(|e| e.to_string())?;
    let resid = x - old.theta_hat.mean(t);
    let tol = 1e-10 * (1.0 + old.rss + resid * resid);
    ensure(new.rss >= old.rss - tol, || {
        format!("rss fell from {} to {}", old.rss, new.rss)
    })?;
    ensure(new.rss <= old.rss + resid * resid + tol, || {
        format!(
            "rss rose from {} to {} beyond residual bound {}",
            old.rss,
            new.rss,
            resid * resid
        )
    })
}

pub fn information_pd<D: Design>(theta: &Theta, design: &D) -> Check {
    let info = asymptotic_information(theta, design).map_err(|e| e.to_string())?;
    info.cholesky()
        .map(|_| ())
        .map_err(|e| format!("cholesky failed at {theta:?}: {e}"))
}

pub fn inverse_identity(info: &InfoMatrix) -> Check {
    let inv = info.inverse().map_err(|e| e.to_string())?;
    let prod = info.mul(&inv);
    for (i, row) in prod.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            ensure((v - target).abs() <= 1e-8, || {
                format!("(I I^-1)[{i}][{j}] = {v}")
            })?;
        }
    }
    Ok(())
}

pub fn sigma_block<D: Design>(theta: &Theta, design: &D) -> Check {
    let inv = asymptotic_information(theta, design)
        .and_then(|i| i.inverse())
        .map_err(|e| e.to_string())?;
    let want = 2.0 * theta.sigma2 * theta.sigma2;
    let got = inv.get(2, 2);
    ensure((got - want).abs() <= 1e-12 * want, || {
        format!("[I^-1]_33 = {got}, want {want}")
    })?;
    ensure(inv.get(0, 2) == 0.0 && inv.get(1, 2) == 0.0, || {
        "sigma2 block not decoupled".into()
    })
}

/// Grid weights are non-negative and trapezoid-integrate to one.
pub fn posterior_normalized(data: &Dataset, prior: &Prior) -> Check {
    let fit = fit_mle(data, &prior.domain).map_err(|e| e.to_string())?;
    let nodes = default_u_grid(data, &fit, &prior.domain);
    let grid = u_marginal_log_posterior(data, prior, &nodes).map_err(|e| e.to_string())?;
    ensure(
        grid.weights.iter().all(|&w| w >= 0.0 && w.is_finite()),
        || "negative weight".into(),
    )?;
    let mass = grid.total_mass();
    ensure((mass - 1.0).abs() <= 1e-10, || format!("grid mass {mass}"))
}

pub fn bvm_in_range(data: &Dataset, prior: &Prior) -> Check {
    let fit = fit_mle(data, &prior.domain).map_err(|e| e.to_string())?;
    if fit.is_flagged() {
        return Ok(());
    }
    let nodes = default_u_grid(data, &fit, &prior.domain);
    let grid = u_marginal_log_posterior(data, prior, &nodes).map_err(|e| e.to_string())?;
    let info =
        twophase::fisher::empirical_information(&fit.theta_hat, data).map_err(|e| e.to_string())?;
    match bvm_l1_u(&grid, &fit, &info, data.len()) {
        Ok(l1) => ensure((0.0..=2.0).contains(&l1), || {
            format!("bvm L1 {l1} outside [0, 2]")
        }),
        // Coverage refusals are legitimate errors, not range violations.
        Err(_) => Ok(()),
    }
}

pub fn deletion_idempotent(data: &Dataset, u0: f64, rule: &WindowRule) -> Check {
    let Ok(once) = pseudo_delete(data, u0, rule) else {
        return Ok(());
    };
    ensure(once.kept_count() + once.deleted_count == data.len(), || {
        "counts do not add up".into()
    })?;
    let (lo, hi) = once.window;
    ensure(once.kept.t().iter().all(|&t| !(t > lo && t < hi)), || {
        "kept point inside window".into()
    })?;
    let twice = once.redelete().map_err(|e| e.to_string())?;
    ensure(twice.kept == once.kept, || {
        "second deletion changed the kept set".into()
    })
}

/// Kept fraction `n*/n` rises toward one along `ns` for data from `design`.
pub fn kept_fraction_trend(
    rule: &WindowRule,
    u0: f64,
    design: &LimitDesign,
    ns: &[usize],
    seed: u64,
) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fracs = Vec::new();
    for &n in ns {
        let t: Vec<f64> = (0..n)
            .map(|_| design.quantile(rng.random::<f64>()))
            .collect();
        let d = Dataset::new(t, vec![0.0; n]).map_err(|e| e.to_string())?;
        let p = pseudo_delete(&d, u0, rule).map_err(|e| e.to_string())?;
        fracs.push(p.kept_count() as f64 / n as f64);
    }
    ensure(fracs.windows(2).all(|w| w[1] >= w[0]), || {
        format!("kept fractions not rising: {fracs:?}")
    })?;
    // The window width itself must vanish for n*/n to reach one.
    let last = *ns.last().unwrap_or(&1);
    ensure(rule.width(last) < rule.width(ns[0]), || {
        "window width not shrinking".into()
    })
}

pub fn rejects_wide_power(alpha: f64) -> Check {
    ensure(WindowRule::power(alpha).is_err(), || {
        format!("power rule with alpha = {alpha} accepted")
    })
}

fn strip_timing(report: &StudyReport) -> serde_json::Value {
    let mut v: serde_json::Value =
        serde_json::from_str(&report.to_json().expect("serialisable")).expect("json");
    v["meta"]["wall_time_s"] = serde_json::Value::Null;
    v
}

pub fn study_deterministic(scenario: &Scenario, workers: (usize, usize)) -> Check {
    let a = run_study(scenario, workers.0).map_err(|e| e.to_string())?;
    let b = run_study(scenario, workers.1).map_err(|e| e.to_string())?;
    ensure(a.records == b.records, || {
        "records differ between runs".into()
    })?;
    ensure(strip_timing(&a) == strip_timing(&b), || {
        "reports differ between runs".into()
    })
}

pub fn replicate_independence(report: &StudyReport) -> Check {
    for rec in report.records.iter().step_by(7) {
        let again =
            run_replicate(&report.scenario, rec.n, rec.rep_id).map_err(|e| e.to_string())?;
        ensure(&again == rec, || {
            format!(
                "replicate (n = {}, r = {}) not reproduced",
                rec.n, rec.rep_id
            )
        })?;
    }
    Ok(())
}

pub fn no_silent_loss(report: &StudyReport) -> Check {
    let s = &report.scenario;
    let expected = s.n_grid.len() * s.replicates;
    let got = report.records.len() + report.failures.len();
    ensure(got == expected, || {
        format!("{got} records + failures, expected {expected}")
    })?;
    for &n in &s.n_grid {
        let per_n = report.records.iter().filter(|r| r.n == n).count()
            + report.failures.iter().filter(|f| f.n == n).count();
        ensure(per_n == s.replicates, || {
            format!("n = {n} accounts for {per_n} replicates")
        })?;
    }
    ensure(
        report.records.iter().all(|r| r.rep_id < s.replicates),
        || "rep_id out of range".into(),
    )
}

/// Median error non-increasing with at most one adjacent inversion.
pub fn monotone_concentration(report: &StudyReport) -> Check {
    let med: Vec<f64> = report.aggregates.iter().map(|a| a.median_error).collect();
    let inversions = med.windows(2).filter(|w| w[1] > w[0]).count();
    ensure(inversions <= 1, || {
        format!("median errors {med:?} have {inversions} inversions")
    })
}

/// Mass of `|u - u0| < 0.1` rises along the n-grid and tops 0.99 at the end.
pub fn posterior_concentration(report: &StudyReport) -> Check {
    let mass: Option<Vec<f64>> = report
        .aggregates
        .iter()
        .map(|a| a.mean_u_mass_near_u0)
        .collect();
    let mass = mass.ok_or_else(|| "posterior pipeline missing".to_string())?;
    ensure(mass.windows(2).all(|w| w[1] >= w[0]), || {
        format!("mass not increasing: {mass:?}")
    })?;
    let last = *mass.last().unwrap_or(&0.0);
    ensure(last > 0.99, || format!("mass {last} at the largest n"))
}

/// `n*/n` from the study rises toward one.
pub fn study_kept_fraction(report: &StudyReport) -> Check {
    let del: Option<Vec<f64>> = report
        .aggregates
        .iter()
        .map(|a| a.mean_deleted_fraction)
        .collect();
    let del = del.ok_or_else(|| "pseudo pipeline missing".to_string())?;
    ensure(del.windows(2).all(|w| w[1] < w[0]), || {
        format!("deleted fractions not falling: {del:?}")
    })
}
