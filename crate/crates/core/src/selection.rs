//! Model selection by the Bayesian reliability of a fitted curve:
//!
//! ```text
//! P(M|D) ~ sum_i (1/R_i^2)(1 - exp(-R_i^2/(2 sigma0_i^2))) * prod_lambda sigma_lambda sqrt(2 pi)/(lambda_max - lambda_min)
//! ```
//!
//! The product is the Ockham factor; it penalizes each parameter by how much
//! of its prior range the data actually pin down.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::curves::CurveModel;
use crate::error::{Error, Result};
use crate::fitting::{
    fit_least_squares, uncertainties_cramer_rao, uncertainties_hessian, weights::kernel_h, DataPoint, Design,
    FitOptions, FitResult,
};
use crate::numeric::{bisect, csum};

/// Multiplier `k` of the default `lambda +- k sigma` range rule.
pub const DEFAULT_RANGE_K: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvidence {
    pub model: CurveModel,
    /// Reliability up to a constant shared by every model on the same data.
    pub reliability: f64,
    pub ln_reliability: f64,
    /// Sum of the per-point bracket terms.
    pub fit_term: f64,
    pub ockham: f64,
    /// `(lambda_min, lambda_max)` per estimated fit-vector entry.
    pub lambda_ranges: Vec<(f64, f64)>,
    /// `sigma_lambda` per estimated entry.
    pub lambda_sigmas: Vec<f64>,
    /// Fit-vector indices the ranges refer to.
    pub indices: Vec<usize>,
    pub n_params: usize,
}

/// Per-point bracket `(1/R^2)(1 - exp(-R^2/(2 sigma0^2)))`, equal to
/// `1/(2 sigma0^2)` at `R = 0`.
pub fn bracket_term(r: f64, sigma0: f64) -> f64 {
    let t = 0.5 * (r / sigma0).powi(2);
    kernel_h(t) / (2.0 * sigma0 * sigma0)
}

/// Inflation of the least-squares parameter deviations by the residual
/// scatter, `max(1, sqrt(chi2 / (N - n)))`.
pub fn regression_scale(chi2: f64, n_points: usize, n_params: usize) -> f64 {
    if n_points <= n_params {
        return 1.0;
    }
    (chi2 / (n_points - n_params) as f64).sqrt().max(1.0)
}

/// Reliability of a fitted model. Without explicit `ranges` each estimated
/// entry gets `lambda +- 2 sigma_chi`, with `sigma_chi` the least-squares
/// deviation of the same curve scaled by [`regression_scale`]. `sigma_lambda` comes from the Hessian of the fit's
/// log-posterior, falling back to the Cramér-Rao bound.
pub fn evidence(data: &[DataPoint], fit: &FitResult, ranges: Option<&[(f64, f64)]>) -> Result<ModelEvidence> {
    if !fit.converged {
        return Err(Error::NotConverged);
    }
    let design = Design::new(data, &fit.model)?;
    let fit_term = csum(
        design
            .residuals(&fit.model)
            .iter()
            .zip(&design.s)
            .map(|(r, s)| bracket_term(*r, *s)),
    );
    let active = fit.active();
    let theta = fit.model.fit_vector();
    if active.is_empty() {
        return Ok(ModelEvidence {
            model: fit.model.clone(),
            reliability: fit_term,
            ln_reliability: fit_term.ln(),
            fit_term,
            ockham: 1.0,
            lambda_ranges: Vec::new(),
            lambda_sigmas: Vec::new(),
            indices: Vec::new(),
            n_params: 0,
        });
    }
    let sigmas = uncertainties_hessian(data, fit).or_else(|_| uncertainties_cramer_rao(data, fit))?;
    let ranges: Vec<(f64, f64)> = match ranges {
        Some(r) => {
            if r.len() != active.len() {
                return Err(Error::InvalidInput(format!(
                    "expected {} parameter ranges, got {}",
                    active.len(),
                    r.len()
                )));
            }
            r.to_vec()
        }
        None => {
            let opts = FitOptions {
                y0: fit.y0_mode,
                ..FitOptions::default()
            };
            let ls = fit_least_squares(data, &fit.model, &opts)?;
            let scale = regression_scale(ls.chi2, data.len(), active.len());
            active
                .iter()
                .map(|&j| {
                    let half = DEFAULT_RANGE_K * scale * ls.sigmas[j];
                    (theta[j] - half, theta[j] + half)
                })
                .collect()
        }
    };
    let mut ln_ockham = 0.0;
    let mut lambda_sigmas = Vec::with_capacity(active.len());
    for (&(lo, hi), &j) in ranges.iter().zip(&active) {
        let width = hi - lo;
        if !(width > 0.0) || !width.is_finite() {
            return Err(Error::InvalidInput(format!(
                "parameter {j} has an empty range [{lo}, {hi}]"
            )));
        }
        if !(lo <= theta[j] && theta[j] <= hi) {
            return Err(Error::InvalidInput(format!(
                "fitted value {} of parameter {j} lies outside its range [{lo}, {hi}]",
                theta[j]
            )));
        }
        let s = sigmas[j];
        lambda_sigmas.push(s);
        ln_ockham += (s * (2.0 * PI).sqrt() / width).ln();
    }
    let ln_reliability = fit_term.ln() + ln_ockham;
    Ok(ModelEvidence {
        model: fit.model.clone(),
        reliability: ln_reliability.exp(),
        ln_reliability,
        fit_term,
        ockham: ln_ockham.exp(),
        lambda_ranges: ranges,
        lambda_sigmas,
        indices: active,
        n_params: fit.active().len(),
    })
}

/// Preference ratio `W = P(A|D) / P(B|D)`; `W > 1` favors `a`.
pub fn compare(a: &ModelEvidence, b: &ModelEvidence) -> Result<f64> {
    if !(b.reliability > 0.0) && !b.ln_reliability.is_finite() {
        return Err(Error::InvalidInput("second model has zero reliability".into()));
    }
    Ok((a.ln_reliability - b.ln_reliability).exp())
}

/// Ranges found from the data scatter rather than from a `k sigma` rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitraryRanges {
    pub ranges: Vec<(f64, f64)>,
    /// Data indices left outside the band, per parameter.
    pub excluded: Vec<Vec<usize>>,
    /// Fit-vector indices the ranges refer to.
    pub indices: Vec<usize>,
}

/// Most points that may stay outside the band.
pub const MAX_OUTSIDE: usize = 3;

/// Parameter values, varying entry `j` alone, for which the curve passes
/// through `target` at point `i`. `None` when the target is unreachable.
fn crossing(
    design: &Design,
    base: &CurveModel,
    theta: &[f64],
    j: usize,
    i: usize,
    target: f64,
    step0: f64,
) -> Option<f64> {
    let f = |x: f64| {
        let mut v = theta.to_vec();
        v[j] = x;
        base.with_fit_vector_unchecked(&v).eval_unchecked(design.dose[i].as_slice()) - target
    };
    let f0 = f(theta[j]);
    if f0 == 0.0 {
        return Some(theta[j]);
    }
    // expand outward in both directions until the sign changes
    let mut step = step0;
    for _ in 0..200 {
        for dir in [1.0, -1.0] {
            let x = theta[j] + dir * step;
            let fx = f(x);
            if fx.is_finite() && fx.signum() != f0.signum() {
                let (a, b) = if dir > 0.0 { (theta[j], x) } else { (x, theta[j]) };
                return bisect(f, a, b, 1e-14 * (a.abs() + b.abs()).max(1e-300));
            }
        }
        step *= 2.0;
        if !step.is_finite() {
            break;
        }
    }
    None
}

/// Narrowest range, per estimated parameter with the others held at their
/// fitted values, whose swept band of curves contains every point's
/// `E +- sigma0` bar except at most three.
pub fn arbitrary_ranges(data: &[DataPoint], fit: &FitResult) -> Result<ArbitraryRanges> {
    if data.len() <= MAX_OUTSIDE {
        return Err(Error::InvalidInput(format!(
            "arbitrary ranges need at least {} points, got {}",
            MAX_OUTSIDE + 1,
            data.len()
        )));
    }
    let design = Design::new(data, &fit.model)?;
    let theta = fit.model.fit_vector();
    let active = fit.active();
    let mut row = vec![0.0; fit.model.n_addressable()];
    let mut out = ArbitraryRanges {
        ranges: Vec::new(),
        excluded: Vec::new(),
        indices: active.clone(),
    };
    for &j in &active {
        // required interval per informative point; None = bar unreachable
        let mut need: Vec<(usize, Option<(f64, f64)>)> = Vec::new();
        for i in 0..design.len() {
            design.gradient(&fit.model, i, &mut row);
            let slope = row[j];
            if slope == 0.0 {
                continue;
            }
            let step0 = (design.s[i] / slope.abs()).max(1e-12 * theta[j].abs());
            let lo = crossing(&design, &fit.model, &theta, j, i, design.e[i] - design.s[i], step0);
            let hi = crossing(&design, &fit.model, &theta, j, i, design.e[i] + design.s[i], step0);
            let iv = match (lo, hi) {
                (Some(a), Some(b)) => Some((a.min(b), a.max(b))),
                _ => None,
            };
            need.push((i, iv));
        }
        let (range, excluded) = narrowest_hull(theta[j], &need)?;
        out.ranges.push(range);
        out.excluded.push(excluded);
    }
    Ok(out)
}

fn narrowest_hull(center: f64, need: &[(usize, Option<(f64, f64)>)]) -> Result<((f64, f64), Vec<usize>)> {
    let forced: Vec<usize> = need.iter().filter(|(_, iv)| iv.is_none()).map(|(i, _)| *i).collect();
    if forced.len() > MAX_OUTSIDE {
        return Err(Error::InvalidInput(format!(
            "{} points cannot be reached by varying the parameter",
            forced.len()
        )));
    }
    let finite: Vec<(usize, f64, f64)> = need.iter().filter_map(|(i, iv)| iv.map(|(a, b)| (*i, a, b))).collect();
    let budget = MAX_OUTSIDE - forced.len();
    let mut by_lo: Vec<usize> = (0..finite.len()).collect();
    by_lo.sort_by(|&a, &b| finite[a].1.total_cmp(&finite[b].1));
    let mut by_hi = by_lo.clone();
    by_hi.sort_by(|&a, &b| finite[b].2.total_cmp(&finite[a].2));
    let mut cand: Vec<usize> = by_lo.iter().take(budget).chain(by_hi.iter().take(budget)).copied().collect();
    cand.sort_unstable();
    cand.dedup();
    let hull = |skip: &[usize]| {
        let mut lo = center;
        let mut hi = center;
        for (k, &(_, a, b)) in finite.iter().enumerate() {
            if !skip.contains(&k) {
                lo = lo.min(a);
                hi = hi.max(b);
            }
        }
        (lo, hi)
    };
    let mut best: Option<((f64, f64), Vec<usize>)> = None;
    let mut consider = |skip: Vec<usize>| {
        let (lo, hi) = hull(&skip);
        let better = match &best {
            None => true,
            Some(((bl, bh), bs)) => {
                let (w, bw) = (hi - lo, bh - bl);
                w < bw || (w == bw && skip.len() < bs.len())
            }
        };
        if better {
            best = Some(((lo, hi), skip));
        }
    };
    consider(Vec::new());
    for a in 0..cand.len() {
        if budget >= 1 {
            consider(vec![cand[a]]);
        }
        for b in a + 1..cand.len() {
            if budget >= 2 {
                consider(vec![cand[a], cand[b]]);
            }
            for c in b + 1..cand.len() {
                if budget >= 3 {
                    consider(vec![cand[a], cand[b], cand[c]]);
                }
            }
        }
    }
    let ((lo, hi), skip) = best.expect("at least the empty exclusion is considered");
    let mut excluded: Vec<usize> = skip.iter().map(|&k| finite[k].0).chain(forced).collect();
    excluded.sort_unstable();
    Ok(((lo, hi), excluded))
}
