//! Neutron and gamma dose estimation from an observed aberration frequency:
//! the classical closed-form split, the quasi-Bayesian transform of a prior
//! on `theta`, and Poisson-likelihood Bayesian posteriors integrated over
//! `theta` and, optionally, over the curve parameters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curves::{CurveKind, CurveModel};
use crate::error::{Error, Result};
use crate::numeric::{bisect, csum, golden_max, integrate, ln_gamma, stream, trapezoid, QuadConfig};
use crate::priors::{ParamPrior, ParamSampler, ThetaPrior};

/// Margin kept from the `theta` poles at 0 and 1 when integrating.
pub const THETA_EPS: f64 = 1e-6;
pub const DEFAULT_GRID_POINTS: usize = 2000;
pub const DEFAULT_MC_SAMPLES: usize = 100_000;
pub const MIN_MC_SAMPLES: usize = 10_000;
/// Simplex tolerance for jointly drawn fractions.
pub const SIMPLEX_TOL: f64 = 0.01;
const MAX_SIMPLEX_ATTEMPTS: u64 = 1_000_000;

/// Observed counts for one exposed person.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Casework {
    pub cells: u64,
    pub aberrations: u64,
    /// Overrides the Poisson `sqrt(u)/w` uncertainty of `y_f`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_yf: Option<f64>,
}

impl Casework {
    pub fn new(cells: u64, aberrations: u64) -> Result<Self> {
        let c = Casework {
            cells,
            aberrations,
            sigma_yf: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_sigma_yf(mut self, s: f64) -> Result<Self> {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma_yf must be >= 0, got {s}")));
        }
        self.sigma_yf = Some(s);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 {
            return Err(Error::InvalidInput("casework needs at least one cell".into()));
        }
        if let Some(s) = self.sigma_yf {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidInput(format!("sigma_yf must be >= 0, got {s}")));
            }
        }
        Ok(())
    }

    /// Observed frequency `u/w`.
    pub fn y_f(&self) -> f64 {
        self.aberrations as f64 / self.cells as f64
    }

    pub fn sigma_yf(&self) -> f64 {
        self.sigma_yf
            .unwrap_or_else(|| (self.aberrations as f64).sqrt() / self.cells as f64)
    }

    /// Poisson log-likelihood of the counts at expected frequency `y`;
    /// `-inf` when `y` is not a valid frequency.
    pub fn ln_likelihood(&self, y: f64) -> f64 {
        Poisson::new(self).ln_l(y)
    }
}

/// Poisson likelihood with the `ln u!` term computed once.
#[derive(Clone, Copy)]
struct Poisson {
    w: f64,
    u: f64,
    ln_fact: f64,
}

impl Poisson {
    fn new(c: &Casework) -> Self {
        let u = c.aberrations as f64;
        Poisson {
            w: c.cells as f64,
            u,
            ln_fact: ln_gamma(u + 1.0),
        }
    }

    fn ln_l(&self, y: f64) -> f64 {
        if !y.is_finite() || y < 0.0 {
            return f64::NEG_INFINITY;
        }
        let wy = self.w * y;
        if self.u == 0.0 {
            return -wy;
        }
        if y == 0.0 {
            return f64::NEG_INFINITY;
        }
        self.u * wy.ln() - wy - self.ln_fact
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Classical,
    Quasi,
    Simplified,
    Full,
    Generalized,
}

/// Dose grid: `points` equally spaced doses on `[0, d_max]`. Without
/// `d_max` the grid ends where the curve along the component's own axis
/// reaches `max(3 y_f, Y0 + 10/w)`, kept below `Ymax`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default)]
    pub d_max: Option<f64>,
    #[serde(default = "default_points")]
    pub points: usize,
}

fn default_points() -> usize {
    DEFAULT_GRID_POINTS
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            d_max: None,
            points: DEFAULT_GRID_POINTS,
        }
    }
}

impl GridSpec {
    pub fn fixed(d_max: f64, points: usize) -> Self {
        GridSpec {
            d_max: Some(d_max),
            points,
        }
    }

    fn build(&self, auto: impl FnOnce() -> Result<f64>) -> Result<Vec<f64>> {
        if self.points < 3 {
            return Err(Error::InvalidInput(format!(
                "dose grid needs at least 3 points, got {}",
                self.points
            )));
        }
        let d_max = match self.d_max {
            Some(d) => d,
            None => auto()?,
        };
        if !(d_max > 0.0 && d_max.is_finite()) {
            return Err(Error::InvalidInput(format!("grid end must be > 0, got {d_max}")));
        }
        let n = self.points - 1;
        Ok((0..=n).map(|k| d_max * k as f64 / n as f64).collect())
    }
}

/// Monte Carlo settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McSpec {
    pub samples: usize,
    pub seed: u64,
}

impl Default for McSpec {
    fn default() -> Self {
        McSpec {
            samples: DEFAULT_MC_SAMPLES,
            seed: 0,
        }
    }
}

impl McSpec {
    fn validate(&self) -> Result<()> {
        if self.samples < MIN_MC_SAMPLES {
            return Err(Error::InvalidInput(format!(
                "Monte Carlo needs at least {MIN_MC_SAMPLES} samples, got {}",
                self.samples
            )));
        }
        Ok(())
    }
}

/// Posterior density of one dose component on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DosePosterior {
    pub method: Method,
    pub dose: Vec<f64>,
    /// Unnormalized density on `dose`.
    pub density: Vec<f64>,
    /// Trapezoid integral of `density`.
    pub normalization: f64,
    pub peak: f64,
    pub peak_at_boundary: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

impl DosePosterior {
    pub fn normalized_density(&self) -> Vec<f64> {
        self.density.iter().map(|v| v / self.normalization).collect()
    }

    /// Density scaled to a unit maximum.
    pub fn peak_normalized(&self) -> Vec<f64> {
        let m = self.density.iter().fold(0.0f64, |a, &b| a.max(b));
        self.density.iter().map(|v| v / m).collect()
    }

    pub fn mean(&self) -> f64 {
        let xf: Vec<f64> = self.dose.iter().zip(&self.density).map(|(x, f)| x * f).collect();
        trapezoid(&self.dose, &xf) / self.normalization
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let v: Vec<f64> = self.dose.iter().zip(&self.density).map(|(x, f)| (x - m).powi(2) * f).collect();
        trapezoid(&self.dose, &v) / self.normalization
    }

    /// Grid spacing near the peak.
    pub fn step(&self) -> f64 {
        self.dose[1] - self.dose[0]
    }

    fn argmax(&self) -> usize {
        let mut k = 0;
        for (i, &v) in self.density.iter().enumerate() {
            if v > self.density[k] {
                k = i;
            }
        }
        k
    }

    /// Number of local maxima of the density, ignoring zero plateaus.
    pub fn mode_count(&self) -> usize {
        let d: Vec<f64> = self.density.clone();
        let mut modes = 0;
        let mut rising = true;
        for i in 1..d.len() {
            if d[i] < d[i - 1] && rising {
                modes += 1;
                rising = false;
            } else if d[i] > d[i - 1] {
                rising = true;
            }
        }
        if rising && d.last().copied().unwrap_or(0.0) > 0.0 {
            modes += 1;
        }
        modes
    }
}

/// Both components of a two-type split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPosterior {
    pub gamma: DosePosterior,
    pub neutron: DosePosterior,
}

/// Gamma and neutron doses (Gy).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub dg: f64,
    pub dn: f64,
}

struct Mixed {
    alpha: f64,
    beta: f64,
    gamma: f64,
    y0: f64,
}

fn mixed(curve: &CurveModel) -> Result<Mixed> {
    if curve.kind() != CurveKind::CombinedMixed {
        return Err(Error::InvalidCurve(format!(
            "closed-form dose split needs a combined_mixed curve, got {}",
            curve.kind()
        )));
    }
    let p = curve.params();
    Ok(Mixed {
        alpha: p[0],
        beta: p[1],
        gamma: p[2],
        y0: curve.y0(),
    })
}

/// Root of `gamma D^2 + b D - delta = 0` for `D >= 0`, in a form that does
/// not cancel when `4 gamma delta` is small against `b^2`.
fn quad_root(gamma: f64, b: f64, delta: f64) -> Option<f64> {
    if delta == 0.0 {
        return Some(0.0);
    }
    if gamma == 0.0 {
        return if b > 0.0 { Some(delta / b) } else { None };
    }
    let disc = b * b + 4.0 * gamma * delta;
    if !(disc >= 0.0) {
        return None;
    }
    let s = disc.sqrt();
    if b >= 0.0 {
        Some(2.0 * delta / (s + b))
    } else {
        Some((s - b) / (2.0 * gamma))
    }
}

/// Closed-form doses for exactly known `theta` on a combined mixed curve.
pub fn classical_split(curve: &CurveModel, y_f: f64, theta: f64) -> Result<Split> {
    let m = mixed(curve)?;
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::ThetaOutOfRange(theta));
    }
    split_raw(&m, y_f, theta)
}

fn split_raw(m: &Mixed, y_f: f64, theta: f64) -> Result<Split> {
    if !(y_f >= m.y0) {
        return Err(Error::BelowBackground { y_f, y0: m.y0 });
    }
    let delta = y_f - m.y0;
    if theta == 0.0 {
        if !(m.alpha > 0.0) {
            return Err(Error::InvalidCurve("pure-neutron split needs alpha > 0".into()));
        }
        return Ok(Split {
            dg: 0.0,
            dn: delta / m.alpha,
        });
    }
    let ratio = (1.0 - theta) / theta;
    let b = m.alpha * ratio + m.beta;
    let dg = quad_root(m.gamma, b, delta)
        .ok_or_else(|| Error::InvalidCurve("curve cannot reach the observed frequency".into()))?;
    Ok(Split { dg, dn: dg * ratio })
}

/// Uncertainties of the inputs to [`classical_split`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSigmas {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub y_f: f64,
    pub y0: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitUncertainty {
    /// Sum of absolute finite increments.
    pub sigma_dg: f64,
    pub sigma_dn: f64,
    /// Root-sum-square of the same increments.
    pub rss_dg: f64,
    pub rss_dn: f64,
}

/// Finite-increment uncertainty `sum_j |dD/de_j| de_j` with central
/// differences, together with the root-sum-square combination.
pub fn classical_uncertainty(
    curve: &CurveModel,
    y_f: f64,
    theta: f64,
    sigmas: &SplitSigmas,
) -> Result<SplitUncertainty> {
    let m = mixed(curve)?;
    let s = [sigmas.alpha, sigmas.beta, sigmas.gamma, sigmas.y_f, sigmas.y0, sigmas.theta];
    if s.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("parameter uncertainties must be finite and >= 0".into()));
    }
    let base = [m.alpha, m.beta, m.gamma, y_f, m.y0, theta];
    split_raw(&m, y_f, theta)?;
    let eval = |v: &[f64; 6]| -> Result<Split> {
        split_raw(
            &Mixed {
                alpha: v[0],
                beta: v[1],
                gamma: v[2],
                y0: v[4],
            },
            v[3],
            v[5],
        )
    };
    let mut inc_g = [0.0; 6];
    let mut inc_n = [0.0; 6];
    for j in 0..6 {
        if s[j] == 0.0 {
            continue;
        }
        let h = 1e-6 * base[j].abs().max(s[j]);
        let mut up = base;
        let mut dn = base;
        up[j] += h;
        dn[j] -= h;
        if j == 5 && !(dn[5] > 0.0 && up[5] <= 1.0) {
            return Err(Error::BoundaryTheta(theta));
        }
        let (a, b) = (eval(&up)?, eval(&dn)?);
        inc_g[j] = ((a.dg - b.dg) / (2.0 * h)).abs() * s[j];
        inc_n[j] = ((a.dn - b.dn) / (2.0 * h)).abs() * s[j];
    }
    let rss = |v: &[f64; 6]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(SplitUncertainty {
        sigma_dg: inc_g.iter().sum(),
        sigma_dn: inc_n.iter().sum(),
        rss_dg: rss(&inc_g),
        rss_dn: rss(&inc_n),
    })
}

/// `theta` implied by a gamma dose on the observed-frequency contour, with
/// its derivative.
fn theta_of_dg(m: &Mixed, delta: f64, dg: f64) -> Option<(f64, f64)> {
    let dn = (delta - m.beta * dg - m.gamma * dg * dg) / m.alpha;
    if !(dn >= 0.0) || !(dg > 0.0) {
        return None;
    }
    let s = dg + dn;
    let dn1 = -(m.beta + 2.0 * m.gamma * dg) / m.alpha;
    Some((dg / s, (dn - dg * dn1) / (s * s)))
}

/// `theta` implied by a neutron dose on the observed-frequency contour.
fn theta_of_dn(m: &Mixed, delta: f64, dn: f64) -> Option<(f64, f64)> {
    let rest = delta - m.alpha * dn;
    if !(rest >= 0.0) || !(dn > 0.0) {
        return None;
    }
    let dg = quad_root(m.gamma, m.beta, rest)?;
    let s = dg + dn;
    let dg1 = -m.alpha / (m.beta + 2.0 * m.gamma * dg);
    Some((dg / s, (dg1 * dn - dg) / (s * s)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QuasiOptions {
    /// Multiply by `|d theta / dD|` when changing variables.
    pub jacobian: bool,
}

/// Dose distributions induced by a prior on `theta` through the exact
/// frequency contour of a combined mixed curve.
pub fn quasi_bayesian(
    curve: &CurveModel,
    y_f: f64,
    prior: &ThetaPrior,
    grid: &GridSpec,
    opts: &QuasiOptions,
) -> Result<SplitPosterior> {
    let m = mixed(curve)?;
    prior.validate()?;
    if !(y_f >= m.y0) {
        return Err(Error::BelowBackground { y_f, y0: m.y0 });
    }
    if !(m.alpha > 0.0) {
        return Err(Error::InvalidCurve("quasi-Bayesian split needs alpha > 0".into()));
    }
    let delta = y_f - m.y0;
    let target = (3.0 * y_f).max(m.y0 + delta.max(f64::MIN_POSITIVE));
    let g_grid = grid.build(|| axis_dose(curve, 1, target))?;
    let n_grid = grid.build(|| axis_dose(curve, 0, target))?;
    if let ThetaPrior::PointMass { theta } = *prior {
        let s = split_raw(&m, y_f, theta)?;
        return Ok(SplitPosterior {
            gamma: spike(Method::Quasi, g_grid, s.dg),
            neutron: spike(Method::Quasi, n_grid, s.dn),
        });
    }
    let dens = |t: Option<(f64, f64)>| match t {
        Some((th, d1)) if th > 0.0 && th < 1.0 => {
            let p = prior.density_unchecked(th);
            if opts.jacobian {
                p * d1.abs()
            } else {
                p
            }
        }
        _ => 0.0,
    };
    let gamma = build_posterior(Method::Quasi, g_grid, |d| dens(theta_of_dg(&m, delta, d)))
        .map_err(|e| remap_empty(e, Error::InfeasibleGrid))?;
    let neutron = build_posterior(Method::Quasi, n_grid, |d| dens(theta_of_dn(&m, delta, d)))
        .map_err(|e| remap_empty(e, Error::InfeasibleGrid))?;
    Ok(SplitPosterior { gamma, neutron })
}

fn remap_empty(e: Error, to: Error) -> Error {
    match e {
        Error::InfeasibleGrid => to,
        other => other,
    }
}

/// Dose along axis `component` at which the curve reaches `target`
/// (capped just below `Ymax` for saturating kinds).
fn axis_dose(curve: &CurveModel, component: usize, target: f64) -> Result<f64> {
    let r = curve.radiation_count();
    let mut target = target;
    if curve.kind().uses_ymax() {
        let cap = curve.y0() + (curve.ymax() - curve.y0()) * (1.0 - 1e-3);
        target = target.min(cap);
    }
    let f = |d: f64| {
        let mut dose = vec![0.0; r];
        dose[if r == 1 { 0 } else { component }] = d;
        curve.eval_unchecked(&dose) - target
    };
    if f(0.0) >= 0.0 {
        return Err(Error::InfeasibleGrid);
    }
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::InfeasibleGrid);
        }
    }
    bisect(f, 0.0, hi, 1e-12 * hi).ok_or(Error::InfeasibleGrid)
}

/// Unit-mass spike on the grid point nearest `at`.
fn spike(method: Method, dose: Vec<f64>, at: f64) -> DosePosterior {
    let h = dose[1] - dose[0];
    let n = dose.len();
    let k = ((at / h).round().max(0.0) as usize).min(n - 1);
    let mut density = vec![0.0; n];
    // trapezoid weight of an endpoint is h/2, of an interior point h
    density[k] = if k == 0 || k == n - 1 { 2.0 / h } else { 1.0 / h };
    DosePosterior {
        method,
        normalization: trapezoid(&dose, &density),
        dose,
        density,
        peak: at,
        peak_at_boundary: k == 0 || k == n - 1,
        sigma: None,
    }
}

/// Evaluates `f` on the grid, refines the discrete argmax by golden section
/// over the neighbouring cells and attaches the curvature uncertainty.
fn build_posterior<F: Fn(f64) -> f64 + Sync>(method: Method, dose: Vec<f64>, f: F) -> Result<DosePosterior> {
    let density: Vec<f64> = dose.par_iter().map(|&d| f(d)).collect();
    if let Some(v) = density.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput(format!("posterior density evaluated to {v}")));
    }
    let normalization = trapezoid(&dose, &density);
    if !(normalization > 0.0) {
        return Err(Error::InfeasibleGrid);
    }
    let mut post = DosePosterior {
        method,
        dose,
        density,
        normalization,
        peak: 0.0,
        peak_at_boundary: false,
        sigma: None,
    };
    let k = post.argmax();
    let n = post.dose.len();
    if k == 0 || k == n - 1 {
        post.peak = post.dose[k];
        post.peak_at_boundary = true;
    } else {
        let (a, b) = (post.dose[k - 1], post.dose[k + 1]);
        let h = post.dose[k] - a;
        let x = golden_max(&f, a, b, 1e-6 * h);
        post.peak = if f(x) >= post.density[k] { x } else { post.dose[k] };
        post.sigma = posterior_sigma(&post).ok();
    }
    Ok(post)
}

/// Curvature uncertainty `1/sqrt|d^2 ln P / dD^2|` at the grid maximum,
/// by central differences.
pub fn posterior_sigma(p: &DosePosterior) -> Result<f64> {
    let n = p.dose.len();
    if n < 3 {
        return Err(Error::InvalidInput("posterior grid is too short".into()));
    }
    let k = p.argmax();
    if k == 0 || k == n - 1 {
        return Err(Error::PeakAtBoundary);
    }
    let (l, c, r) = (p.density[k - 1], p.density[k], p.density[k + 1]);
    if l == 0.0 || r == 0.0 {
        return Err(Error::InvalidInput("posterior is concentrated on one grid point".into()));
    }
    let h1 = p.dose[k] - p.dose[k - 1];
    let h2 = p.dose[k + 1] - p.dose[k];
    let curv = 2.0 * (h1 * r.ln() - (h1 + h2) * c.ln() + h2 * l.ln()) / (h1 * h2 * (h1 + h2));
    if !(curv < 0.0) || !curv.is_finite() {
        return Err(Error::FlatPosterior);
    }
    Ok(1.0 / (-curv).sqrt())
}

/// Doses of every component given the dose `d` of component `target` and
/// the fractions `fr` (aligned with the curve's dose order). A curve with a
/// single dose input receives the total.
fn fill_doses(n_inputs: usize, target: usize, d: f64, fr: &[f64], out: &mut [f64]) -> bool {
    let ft = fr[target];
    if d == 0.0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return true;
    }
    if !(ft > 0.0) {
        return false;
    }
    let total = d / ft;
    if n_inputs == 1 {
        out[0] = total;
    } else {
        for (k, o) in out.iter_mut().enumerate() {
            *o = if k == target { d } else { fr[k] * total };
        }
    }
    out.iter().all(|v| v.is_finite())
}

fn likelihood_at(curve: &CurveModel, lik: &Poisson, target: usize, d: f64, fr: &[f64], buf: &mut [f64]) -> f64 {
    if !fill_doses(buf.len(), target, d, fr, buf) {
        return 0.0;
    }
    lik.ln_l(curve.eval_unchecked(buf)).exp()
}

fn two_type_curve(curve: &CurveModel) -> Result<usize> {
    match curve.radiation_count() {
        1 | 2 => Ok(curve.radiation_count()),
        r => Err(Error::InvalidCurve(format!(
            "two-type dose estimation needs a curve with one or two dose inputs, got {r}"
        ))),
    }
}

/// Component index of gamma and neutron in the `[neutron, gamma]` order.
const GAMMA: usize = 1;
const NEUTRON: usize = 0;

fn auto_grid(curve: &CurveModel, case: &Casework, component: usize) -> Result<f64> {
    let w = case.cells as f64;
    let target = (3.0 * case.y_f()).max(curve.y0() + 10.0 / w);
    axis_dose(curve, component, target)
}

/// How the `theta` integral is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThetaIntegration {
    Adaptive { rel_tol: f64, panels: usize },
    MonteCarlo { samples: usize, seed: u64 },
}

impl Default for ThetaIntegration {
    fn default() -> Self {
        ThetaIntegration::Adaptive {
            rel_tol: 1e-8,
            panels: 64,
        }
    }
}

/// Posterior `P(D_x) = int L(D_x | theta) p(theta) dtheta` with a Poisson
/// likelihood for the observed counts and the curve held fixed.
pub fn simplified_bayesian(
    curve: &CurveModel,
    case: &Casework,
    prior: &ThetaPrior,
    grid: &GridSpec,
    integration: &ThetaIntegration,
) -> Result<SplitPosterior> {
    case.validate()?;
    prior.validate()?;
    let inputs = two_type_curve(curve)?;
    let lik = Poisson::new(case);
    let g_grid = grid.build(|| auto_grid(curve, case, GAMMA))?;
    let n_grid = grid.build(|| auto_grid(curve, case, NEUTRON))?;
    if let ThetaPrior::PointMass { theta } = *prior {
        let fr = [1.0 - theta, theta];
        let run = |target: usize, dose: Vec<f64>| {
            if fr[target] == 0.0 {
                return Ok(spike(Method::Simplified, dose, 0.0));
            }
            build_posterior(Method::Simplified, dose, |d| {
                let mut buf = vec![0.0; inputs];
                likelihood_at(curve, &lik, target, d, &fr, &mut buf)
            })
        };
        return Ok(SplitPosterior {
            gamma: run(GAMMA, g_grid)?,
            neutron: run(NEUTRON, n_grid)?,
        });
    }
    match *integration {
        ThetaIntegration::Adaptive { rel_tol, panels } => {
            let cfg = QuadConfig {
                rel_tol,
                panels,
                ..QuadConfig::default()
            };
            let (lo, hi) = prior.support();
            let (lo, hi) = (lo.max(THETA_EPS), hi.min(1.0 - THETA_EPS));
            let run = |target: usize, dose: Vec<f64>| {
                build_posterior(Method::Simplified, dose, |d| {
                    let f = |t: f64| {
                        let mut b = [0.0; 2];
                        likelihood_at(curve, &lik, target, d, &[1.0 - t, t], &mut b[..inputs])
                            * prior.density_unchecked(t)
                    };
                    // split at the likelihood maximum so a narrow peak is not stepped over
                    let y_at = |t: f64| {
                        let mut b = [0.0; 2];
                        if fill_doses(inputs, target, d, &[1.0 - t, t], &mut b[..inputs]) {
                            curve.eval_unchecked(&b[..inputs]) - case.y_f()
                        } else {
                            f64::NAN
                        }
                    };
                    match bisect(y_at, lo, hi, 1e-14).filter(|m| *m > lo && *m < hi) {
                        Some(m) => integrate(f, lo, m, &cfg) + integrate(f, m, hi, &cfg),
                        None => integrate(f, lo, hi, &cfg),
                    }
                })
            };
            Ok(SplitPosterior {
                gamma: run(GAMMA, g_grid)?,
                neutron: run(NEUTRON, n_grid)?,
            })
        }
        ThetaIntegration::MonteCarlo { samples, seed } => {
            let mc = McSpec { samples, seed };
            mc.validate()?;
            let draws = draw_samples(curve, &[], Some(prior), &mc)?;
            Ok(SplitPosterior {
                gamma: mc_posterior(Method::Simplified, &draws, case, GAMMA, inputs, g_grid)?,
                neutron: mc_posterior(Method::Simplified, &draws, case, NEUTRON, inputs, n_grid)?,
            })
        }
    }
}

struct Draw {
    curve: CurveModel,
    fr: Vec<f64>,
}

fn param_samplers(curve: &CurveModel, priors: &[ParamPrior]) -> Result<Vec<ParamSampler>> {
    if priors.is_empty() {
        return Ok(curve.fit_vector().into_iter().map(ParamSampler::Fixed).collect());
    }
    if priors.len() != curve.n_addressable() {
        return Err(Error::InvalidInput(format!(
            "expected {} parameter priors (Y0 first), got {}",
            curve.n_addressable(),
            priors.len()
        )));
    }
    priors.iter().map(|p| p.sampler()).collect()
}

/// Two-type draws: parameters from their priors, `theta` from its prior.
fn draw_samples(
    curve: &CurveModel,
    params: &[ParamPrior],
    prior: Option<&ThetaPrior>,
    mc: &McSpec,
) -> Result<Vec<Draw>> {
    let samplers = param_samplers(curve, params)?;
    let prior = prior.copied().unwrap_or(ThetaPrior::BetaUninformative);
    let envelope = prior.p_max() * (1.0 + 1e-9);
    Ok((0..mc.samples as u64)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream(mc.seed, s);
            let theta = prior.sample_with_envelope(&mut rng, envelope);
            let v: Vec<f64> = samplers.iter().map(|p| p.draw(&mut rng)).collect();
            Draw {
                curve: curve.with_fit_vector_unchecked(&v),
                fr: vec![1.0 - theta, theta],
            }
        })
        .collect())
}

fn mc_density(draws: &[Draw], lik: &Poisson, target: usize, inputs: usize, d: f64) -> f64 {
    let mut buf = vec![0.0; inputs];
    csum(draws.iter().map(|s| likelihood_at(&s.curve, lik, target, d, &s.fr, &mut buf))) / draws.len() as f64
}

fn mc_posterior(
    method: Method,
    draws: &[Draw],
    case: &Casework,
    target: usize,
    inputs: usize,
    grid: Vec<f64>,
) -> Result<DosePosterior> {
    let lik = Poisson::new(case);
    build_posterior(method, grid, |d| mc_density(draws, &lik, target, inputs, d))
        .map_err(|e| remap_empty(e, Error::AllSamplesInfeasible))
}

/// Posterior with the curve parameters (`Y0` first, then the curve's own
/// parameters) drawn from priors as well as `theta`, by plain Monte Carlo.
/// An empty `params` slice holds every parameter at the curve's value.
pub fn full_bayesian(
    curve: &CurveModel,
    params: &[ParamPrior],
    case: &Casework,
    prior: &ThetaPrior,
    grid: &GridSpec,
    mc: &McSpec,
) -> Result<SplitPosterior> {
    case.validate()?;
    prior.validate()?;
    mc.validate()?;
    let inputs = two_type_curve(curve)?;
    let g_grid = grid.build(|| auto_grid(curve, case, GAMMA))?;
    let n_grid = grid.build(|| auto_grid(curve, case, NEUTRON))?;
    let draws = draw_samples(curve, params, Some(prior), mc)?;
    let run = |target: usize, dose: Vec<f64>| {
        if let ThetaPrior::PointMass { theta } = *prior {
            if [1.0 - theta, theta][target] == 0.0 {
                return Ok(spike(Method::Full, dose, 0.0));
            }
        }
        mc_posterior(Method::Full, &draws, case, target, inputs, dose)
    };
    Ok(SplitPosterior {
        gamma: run(GAMMA, g_grid)?,
        neutron: run(NEUTRON, n_grid)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedPosterior {
    /// One posterior per dose input of the curve.
    pub components: Vec<DosePosterior>,
    /// Fraction of joint `theta` draws rejected off the simplex.
    pub rejection_rate: f64,
    /// Set when more than 99% of draws were rejected.
    pub heavy_rejection: bool,
}

/// Posterior per radiation type for a curve with `R >= 2` dose inputs.
/// Each `theta_i` is drawn from its own prior; draws are kept when their sum
/// is within [`SIMPLEX_TOL`] of one and then rescaled onto the simplex.
pub fn generalized_bayesian(
    curve: &CurveModel,
    params: &[ParamPrior],
    case: &Casework,
    priors: &[ThetaPrior],
    grid: &GridSpec,
    mc: &McSpec,
) -> Result<GeneralizedPosterior> {
    case.validate()?;
    mc.validate()?;
    let r = curve.radiation_count();
    if r < 2 {
        return Err(Error::InvalidCurve(format!(
            "generalized estimation needs at least two radiation types, got {r}"
        )));
    }
    if priors.len() != r {
        return Err(Error::InvalidInput(format!("expected {r} theta priors, got {}", priors.len())));
    }
    for p in priors {
        p.validate()?;
    }
    let samplers = param_samplers(curve, params)?;
    let envelopes: Vec<f64> = priors.iter().map(|p| p.p_max() * (1.0 + 1e-9)).collect();
    let drawn: Vec<Result<(Draw, u64)>> = (0..mc.samples as u64)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream(mc.seed, s);
            let mut fr = vec![0.0; r];
            let mut attempts = 0u64;
            loop {
                attempts += 1;
                for (i, p) in priors.iter().enumerate() {
                    fr[i] = p.sample_with_envelope(&mut rng, envelopes[i]);
                }
                let sum: f64 = fr.iter().sum();
                if (sum - 1.0).abs() < SIMPLEX_TOL {
                    fr.iter_mut().for_each(|v| *v /= sum);
                    break;
                }
                if attempts >= MAX_SIMPLEX_ATTEMPTS {
                    return Err(Error::AllSamplesInfeasible);
                }
            }
            let v: Vec<f64> = samplers.iter().map(|p| p.draw(&mut rng)).collect();
            Ok((
                Draw {
                    curve: curve.with_fit_vector_unchecked(&v),
                    fr,
                },
                attempts,
            ))
        })
        .collect();
    let mut draws = Vec::with_capacity(mc.samples);
    let mut attempts = 0u64;
    for d in drawn {
        let (d, a) = d?;
        attempts += a;
        draws.push(d);
    }
    let rejection_rate = 1.0 - mc.samples as f64 / attempts as f64;
    let mut components = Vec::with_capacity(r);
    for (i, p) in priors.iter().enumerate() {
        let dose = grid.build(|| auto_grid(curve, case, i))?;
        if matches!(p, ThetaPrior::PointMass { theta } if *theta == 0.0) {
            components.push(spike(Method::Generalized, dose, 0.0));
            continue;
        }
        components.push(mc_posterior(Method::Generalized, &draws, case, i, r, dose)?);
    }
    Ok(GeneralizedPosterior {
        components,
        rejection_rate,
        heavy_rejection: rejection_rate > 0.99,
    })
}
