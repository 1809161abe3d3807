// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adaptive Gauss–Kronrod (7/15) quadrature.
//!
//! Integrands in this crate are piecewise smooth with kinks at breakpoints,
//! so callers pass the kink locations to [`integrate_split`] and each panel
//! is integrated separately.

use crate::error::{Error, Result};

/// Absolute tolerance used by the information and discrepancy integrals.
pub const DEFAULT_ABS_TOL: f64 = 1e-10;

const MAX_DEPTH: u32 = 48;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];

// Gauss weights for the nodes XGK[1], XGK[3], XGK[5] and the centre.
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One Kronrod panel: returns (K15 estimate, |K15 - G7|).
fn kronrod15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let centre = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(centre);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for (j, (&x, &w)) in XGK[..7].iter().zip(&WGK[..7]).enumerate() {
        let dx = half * x;
        let pair = f(centre - dx) + f(centre + dx);
        kronrod += w * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

fn adapt<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32, worst: &mut f64) -> f64 {
    let (value, err) = kronrod15(f, a, b);
    if err <= tol || depth >= MAX_DEPTH || (b - a).abs() <= f64::EPSILON * a.abs().max(b.abs()) {
        if err > tol {
            *worst = worst.max(err);
        }
        return value;
    }
    let mid = 0.5 * (a + b);
    adapt(f, a, mid, 0.5 * tol, depth + 1, worst) + adapt(f, mid, b, 0.5 * tol, depth + 1, worst)
}

/// Integrates `f` over `[a, b]` to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    integrate_split(f, a, b, &[], tol)
}

/// Integrates `f` over `[a, b]`, splitting the range at every point of
/// `splits` that falls strictly inside it.
pub fn integrate_split<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    splits: &[f64],
    tol: f64,
) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut cuts: Vec<f64> = splits
        .iter()
        .copied()
        .filter(|&s| s > lo && s < hi)
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut edges = Vec::with_capacity(cuts.len() + 2);
    edges.push(lo);
    edges.extend(cuts);
    edges.push(hi);

    let panel_tol = tol / (edges.len() - 1) as f64;
    let mut worst = 0.0_f64;
    let total: f64 = edges
        .windows(2)
        .map(|w| adapt(&f, w[0], w[1], panel_tol, 0, &mut worst))
        .sum();
    if worst > 0.0 {
        return Err(Error::Quadrature {
            achieved: worst,
            requested: tol,
        });
    }
    Ok(sign * total)
}
