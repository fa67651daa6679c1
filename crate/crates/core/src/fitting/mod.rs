//! Calibration fits: Gaussian least squares, Poisson maximum likelihood,
//! robust Bayesian regression and the good-and-bad-data mixture.
//!
//! Fits take a template [`CurveModel`] that fixes the curve structure (kind,
//! degrees, `Ymax`, and `Y0` when it is held fixed). Nonlinear kinds use the
//! template parameters as the starting point when any of them is non-zero.
//!
//! Doses per point: single-radiation kinds see the total `dn + dg`; two-dose
//! kinds see `(dn, dg)`.

pub mod linalg;
mod uncertainty;
pub mod weights;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::curves::{CurveKind, CurveModel};
use crate::error::{Error, Result};
use crate::numeric::{csum, ln_gamma, CompensatedSum};

pub use uncertainty::{hessian_sigmas, uncertainties_cramer_rao, uncertainties_hessian};

/// One calibration observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    /// Neutron dose (Gy).
    pub dn: f64,
    /// Gamma dose (Gy).
    pub dg: f64,
    /// Observed aberration frequency (aberrations/cell).
    pub e: f64,
    /// Vertical uncertainty of `e`.
    pub sigma0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aberrations: Option<u64>,
    /// Horizontal (dose) uncertainty, used only by least squares with
    /// `horizontal` enabled.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub sigma_x: f64,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

/// Counting uncertainty `sqrt(max(u, 1)) / w` of a frequency `u/w`.
pub fn counting_sigma(cells: u64, aberrations: u64) -> f64 {
    (aberrations.max(1) as f64).sqrt() / cells as f64
}

impl DataPoint {
    pub fn new(dn: f64, dg: f64, e: f64, sigma0: f64) -> Self {
        DataPoint {
            dn,
            dg,
            e,
            sigma0,
            cells: None,
            aberrations: None,
            sigma_x: 0.0,
        }
    }

    /// Point built from counts; `sigma0` defaults to the counting uncertainty.
    pub fn from_counts(dn: f64, dg: f64, cells: u64, aberrations: u64, sigma0: Option<f64>) -> Result<Self> {
        if cells == 0 {
            return Err(Error::InvalidInput("cell count must be >= 1".into()));
        }
        Ok(DataPoint {
            dn,
            dg,
            e: aberrations as f64 / cells as f64,
            sigma0: sigma0.unwrap_or_else(|| counting_sigma(cells, aberrations)),
            cells: Some(cells),
            aberrations: Some(aberrations),
            sigma_x: 0.0,
        })
    }

    pub fn with_sigma_x(mut self, sigma_x: f64) -> Self {
        self.sigma_x = sigma_x;
        self
    }

    pub fn total_dose(&self) -> f64 {
        self.dn + self.dg
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidData { index, reason });
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return bad(format!("sigma0 must be > 0, got {}", self.sigma0));
        }
        if !(self.e >= 0.0 && self.e.is_finite()) {
            return bad(format!("frequency must be >= 0, got {}", self.e));
        }
        if !(self.dn >= 0.0 && self.dn.is_finite() && self.dg >= 0.0 && self.dg.is_finite()) {
            return bad(format!("doses must be >= 0, got ({}, {})", self.dn, self.dg));
        }
        if !(self.sigma_x >= 0.0 && self.sigma_x.is_finite()) {
            return bad(format!("sigma_x must be >= 0, got {}", self.sigma_x));
        }
        match (self.cells, self.aberrations) {
            (Some(w), Some(u)) => {
                if w == 0 {
                    return bad("cell count must be >= 1".into());
                }
                let f = u as f64 / w as f64;
                if (f - self.e).abs() > 1e-12 * f.max(1.0) {
                    return bad(format!("frequency {} disagrees with u/w = {f}", self.e));
                }
            }
            (None, None) => {}
            _ => return bad("cells and aberrations must be given together".into()),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Engine {
    LeastSquares,
    PoissonMle,
    RobustBayesian,
    Mixture { phi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Y0Mode {
    Free,
    /// Hold `Y0` at the template value.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub y0: Y0Mode,
    /// Least squares only: inflate each variance by `(dY/dD)^2 sigma_x^2`.
    pub horizontal: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            max_iter: 10_000,
            y0: Y0Mode::Free,
            horizontal: false,
        }
    }
}

impl FitOptions {
    pub fn fixed_y0(mut self) -> Self {
        self.y0 = Y0Mode::Fixed;
        self
    }
}

/// Where [`FitResult::sigmas`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSource {
    Covariance,
    Hessian,
    CramerRao,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: CurveModel,
    /// Per-entry uncertainties of the fit vector `[Y0, params...]`; zero for
    /// held parameters.
    pub sigmas: Vec<f64>,
    pub sigma_source: SigmaSource,
    /// Log-posterior (or log-likelihood) at the optimum.
    pub log_posterior: f64,
    /// Per-point weights: `1/sigma^2` for least squares, `g_i` or `g*_i`
    /// for the Bayesian engines, exposure `w_i D_i` for Poisson.
    pub weights: Vec<f64>,
    pub engine: Engine,
    pub iterations: usize,
    pub converged: bool,
    pub y0_mode: Y0Mode,
    /// `sum ((Y - E)/sigma0)^2`.
    pub chi2: f64,
}

impl FitResult {
    /// Indices of the fit vector that were estimated.
    pub fn active(&self) -> Vec<usize> {
        active_indices(self.model.n_addressable(), self.y0_mode)
    }

    /// Fitted values at each data point.
    pub fn predictions(&self, data: &[DataPoint]) -> Result<Vec<f64>> {
        data.iter().map(|p| self.model.evaluate(dose_of(p, &self.model)?.as_slice())).collect()
    }
}

/// Dose vector a curve sees for one data point.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PointDose {
    d: [f64; 2],
    n: usize,
}

impl PointDose {
    pub(crate) fn as_slice(&self) -> &[f64] {
        &self.d[..self.n]
    }
}

pub(crate) fn dose_of(p: &DataPoint, model: &CurveModel) -> Result<PointDose> {
    match model.radiation_count() {
        1 => Ok(PointDose {
            d: [p.dn + p.dg, 0.0],
            n: 1,
        }),
        2 => Ok(PointDose { d: [p.dn, p.dg], n: 2 }),
        r => Err(Error::InvalidInput(format!(
            "calibration points carry two dose components; a {r}-radiation curve cannot be fitted"
        ))),
    }
}

/// Validated data in the form the engines consume.
#[derive(Debug, Clone)]
pub(crate) struct Design {
    pub dose: Vec<PointDose>,
    pub e: Vec<f64>,
    pub s: Vec<f64>,
    pub sx: Vec<f64>,
}

impl Design {
    pub(crate) fn new(data: &[DataPoint], template: &CurveModel) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidInput("no calibration points".into()));
        }
        let mut dose = Vec::with_capacity(data.len());
        for (i, p) in data.iter().enumerate() {
            p.validate(i)?;
            dose.push(dose_of(p, template)?);
        }
        Ok(Design {
            dose,
            e: data.iter().map(|p| p.e).collect(),
            s: data.iter().map(|p| p.sigma0).collect(),
            sx: data.iter().map(|p| p.sigma_x).collect(),
        })
    }

    pub(crate) fn len(&self) -> usize {
        self.e.len()
    }

    pub(crate) fn residuals(&self, m: &CurveModel) -> Vec<f64> {
        self.dose
            .iter()
            .zip(&self.e)
            .map(|(d, e)| m.eval_unchecked(d.as_slice()) - e)
            .collect()
    }

    /// Row `i` of the Jacobian over the full fit vector.
    pub(crate) fn gradient(&self, m: &CurveModel, i: usize, out: &mut [f64]) {
        m.param_gradient_unchecked(self.dose[i].as_slice(), out);
    }
}

pub(crate) fn active_indices(n: usize, mode: Y0Mode) -> Vec<usize> {
    match mode {
        Y0Mode::Free => (0..n).collect(),
        Y0Mode::Fixed => (1..n).collect(),
    }
}

/// Weighted normal equations `J^T W J`, `J^T W r` over the active columns.
fn normal_equations(
    design: &Design,
    m: &CurveModel,
    w: &[f64],
    active: &[usize],
    target: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let k = active.len();
    let n = m.n_addressable();
    let mut acc_a = vec![CompensatedSum::new(); k * k];
    let mut acc_b = vec![CompensatedSum::new(); k];
    let mut row = vec![0.0; n];
    for i in 0..design.len() {
        design.gradient(m, i, &mut row);
        for (a, &ja) in active.iter().enumerate() {
            let wa = w[i] * row[ja];
            acc_b[a].add(wa * target[i]);
            for (b, &jb) in active.iter().enumerate().skip(a) {
                acc_a[a * k + b].add(wa * row[jb]);
            }
        }
    }
    let mut a = DMatrix::zeros(k, k);
    for r in 0..k {
        for c in r..k {
            let v = acc_a[r * k + c].value();
            a[(r, c)] = v;
            a[(c, r)] = v;
        }
    }
    let b = DVector::from_iterator(k, acc_b.iter().map(|s| s.value()));
    (a, b)
}

/// Exact weighted linear least squares for kinds linear in the fit vector.
fn solve_linear(design: &Design, template: &CurveModel, theta: &[f64], w: &[f64], active: &[usize]) -> Result<Vec<f64>> {
    // Held entries are moved to the right-hand side.
    let mut base = theta.to_vec();
    for &j in active {
        base[j] = 0.0;
    }
    let m0 = template.with_fit_vector_unchecked(&base);
    let target: Vec<f64> = design
        .dose
        .iter()
        .zip(&design.e)
        .map(|(d, e)| e - m0.eval_unchecked(d.as_slice()))
        .collect();
    let (a, b) = normal_equations(design, template, w, active, &target);
    let x = if template.kind() == CurveKind::CombinedMixed && active.len() == 4 {
        let mut a4 = [[0.0; 4]; 4];
        for (r, row) in a4.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = a[(r, c)];
            }
        }
        let b4 = [b[0], b[1], b[2], b[3]];
        linalg::solve_cramer4(&a4, &b4)?.to_vec()
    } else {
        let (s, d) = linalg::equilibrate(&a);
        let bs = b.component_mul(&d);
        let y = linalg::solve_symmetric(&s, &bs)?;
        y.component_mul(&d).iter().copied().collect()
    };
    let mut out = theta.to_vec();
    for (k, &j) in active.iter().enumerate() {
        out[j] = x[k];
    }
    Ok(out)
}

fn weighted_cost(design: &Design, m: &CurveModel, w: &[f64]) -> f64 {
    let c = csum(design.residuals(m).iter().zip(w).map(|(r, w)| w * r * r));
    if c.is_finite() {
        c
    } else {
        f64::INFINITY
    }
}

/// Levenberg-Marquardt minimization of `sum w_i (Y_i - E_i)^2`.
fn levenberg_marquardt(
    design: &Design,
    template: &CurveModel,
    start: &[f64],
    w: &[f64],
    active: &[usize],
    max_iter: usize,
) -> Result<(Vec<f64>, bool)> {
    let mut theta = start.to_vec();
    let mut m = template.with_fit_vector_unchecked(&theta);
    let mut cost = weighted_cost(design, &m, w);
    if !cost.is_finite() {
        return Err(Error::InvalidInput("starting point gives a non-finite objective".into()));
    }
    let mut mu = 1e-3;
    for _ in 0..max_iter {
        let r = design.residuals(&m);
        let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
        let (a, b) = normal_equations(design, &m, w, active, &neg_r);
        let gnorm = b.amax();
        if gnorm == 0.0 {
            return Ok((theta, true));
        }
        let mut accepted = false;
        for _ in 0..60 {
            let mut damped = a.clone();
            for k in 0..active.len() {
                let dkk = a[(k, k)].max(1e-300);
                damped[(k, k)] += mu * dkk;
            }
            let step = damped.clone().lu().solve(&b);
            let Some(step) = step else {
                mu *= 10.0;
                continue;
            };
            let mut trial = theta.clone();
            for (k, &j) in active.iter().enumerate() {
                trial[j] += step[k];
            }
            let mt = template.with_fit_vector_unchecked(&trial);
            let c = weighted_cost(design, &mt, w);
            if c < cost {
                let small_step = active
                    .iter()
                    .enumerate()
                    .all(|(k, &j)| step[k].abs() <= 1e-13 * (trial[j].abs() + 1e-300));
                let small_gain = cost - c <= 1e-15 * cost;
                theta = trial;
                m = mt;
                cost = c;
                mu = (mu / 3.0).max(1e-12);
                accepted = true;
                if small_step || small_gain {
                    return Ok((theta, true));
                }
                break;
            }
            mu *= 4.0;
            if mu > 1e16 {
                break;
            }
        }
        if !accepted {
            // No descent direction left: a stationary point to working precision.
            return Ok((theta, true));
        }
    }
    Ok((theta, false))
}

/// Minimizer of `sum w_i (Y_i - E_i)^2` from `start`.
fn weighted_solve(
    design: &Design,
    template: &CurveModel,
    start: &[f64],
    w: &[f64],
    active: &[usize],
) -> Result<(Vec<f64>, bool)> {
    if template.kind().is_linear_in_params() {
        Ok((solve_linear(design, template, start, w, active)?, true))
    } else {
        levenberg_marquardt(design, template, start, w, active, 500)
    }
}

/// Starting point for nonlinear kinds.
fn initial_guess(design: &Design, template: &CurveModel, mode: Y0Mode) -> Result<Vec<f64>> {
    let mut v = template.fit_vector();
    if template.kind().is_linear_in_params() || template.params().iter().any(|&p| p != 0.0) {
        return Ok(v);
    }
    // Quadratic in total dose as a cheap shape summary.
    let quad = CurveModel::new(CurveKind::LinearQuadraticGamma, vec![0.0, 0.0])?.with_y0(template.y0())?;
    let total: Vec<PointDose> = design
        .dose
        .iter()
        .map(|d| PointDose {
            d: [d.as_slice().iter().sum(), 0.0],
            n: 1,
        })
        .collect();
    let qd = Design {
        dose: total,
        ..design.clone()
    };
    let w: Vec<f64> = design.s.iter().map(|s| 1.0 / (s * s)).collect();
    let active = active_indices(3, mode);
    let (y0, b, c) = match solve_linear(&qd, &quad, &quad.fit_vector(), &w, &active) {
        Ok(q) => (q[0], q[1], q[2]),
        Err(_) => (template.y0(), 0.0, 0.0),
    };
    if mode == Y0Mode::Free {
        v[0] = y0.clamp(0.0, 0.5 * (template.y0() + template.ymax()));
    }
    let span = (template.ymax() - v[0]).max(1e-12);
    let b = (b / span).max(1e-4);
    let c = (c / span).max(1e-4);
    use CurveKind::*;
    match template.kind() {
        SaturatedLinear | CriticalLinear => v[1] = b,
        SaturatedSigmoid | CriticalQuadratic => {
            v[1] = b;
            v[2] = c;
        }
        AvramiSigmoid => {
            v[1] = b;
            v[2] = 1.0;
        }
        Generalized => {
            return Err(Error::InvalidInput(
                "generalized curves need starting parameters in the template".into(),
            ))
        }
        _ => {}
    }
    Ok(v)
}

fn check_count(design: &Design, active: &[usize]) -> Result<()> {
    if design.len() < active.len() {
        return Err(Error::RankDeficient(format!(
            "{} points cannot determine {} parameters",
            design.len(),
            active.len()
        )));
    }
    Ok(())
}

fn chi2(design: &Design, m: &CurveModel) -> f64 {
    csum(design.residuals(m).iter().zip(&design.s).map(|(r, s)| (r / s).powi(2)))
}

/// Log-posterior `S` of `model` on `data` under `engine`.
pub fn log_posterior(data: &[DataPoint], model: &CurveModel, engine: Engine) -> Result<f64> {
    let design = Design::new(data, model)?;
    Ok(log_posterior_design(&design, data, model, engine))
}

pub(crate) fn log_posterior_design(design: &Design, data: &[DataPoint], m: &CurveModel, engine: Engine) -> f64 {
    let r = design.residuals(m);
    let ln_norm = |s: f64| (s * (2.0 * std::f64::consts::PI).sqrt()).ln();
    match engine {
        Engine::LeastSquares => csum(r.iter().zip(&design.s).map(|(r, s)| -0.5 * (r / s).powi(2) - ln_norm(*s))),
        Engine::RobustBayesian => csum(r.iter().zip(&design.s).map(|(r, s)| weights::log_density_p(*r, *s))),
        Engine::Mixture { phi } => {
            csum(r.iter().zip(&design.s).map(|(r, s)| weights::log_density_mixture(*r, *s, phi)))
        }
        Engine::PoissonMle => csum(data.iter().zip(&design.dose).map(|(p, d)| {
            let w = p.cells.unwrap_or(0) as f64;
            let u = p.aberrations.unwrap_or(0) as f64;
            let lam = w * m.eval_unchecked(d.as_slice());
            let lu = if u == 0.0 { 0.0 } else { u * lam.ln() };
            lu - lam - ln_gamma(u + 1.0)
        })),
    }
}

/// `1/sigma^2` weights, inflated by the horizontal term when requested.
fn ls_weights(design: &Design, m: &CurveModel, horizontal: bool) -> Vec<f64> {
    (0..design.len())
        .map(|i| {
            let mut var = design.s[i] * design.s[i];
            if horizontal && design.sx[i] > 0.0 {
                let d = design.dose[i].as_slice();
                for c in 0..d.len() {
                    let slope = m.dose_derivative_unchecked(d, c);
                    var += (slope * design.sx[i]).powi(2);
                }
            }
            1.0 / var
        })
        .collect()
}

/// Standard deviations from `(J^T W J)^-1` at `theta`.
fn covariance_sigmas(design: &Design, m: &CurveModel, w: &[f64], active: &[usize]) -> Result<Vec<f64>> {
    let zero = vec![0.0; design.len()];
    let (a, _) = normal_equations(design, m, w, active, &zero);
    let (s, d) = linalg::equilibrate(&a);
    linalg::check_rank(&s)?;
    let inv = s
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("normal matrix is singular".into()))?;
    let mut out = vec![0.0; m.n_addressable()];
    for (k, &j) in active.iter().enumerate() {
        out[j] = (inv[(k, k)].max(0.0)).sqrt() * d[k];
    }
    Ok(out)
}

struct LsFit {
    theta: Vec<f64>,
    weights: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn least_squares_core(design: &Design, template: &CurveModel, opts: &FitOptions, active: &[usize]) -> Result<LsFit> {
    let start = initial_guess(design, template, opts.y0)?;
    let m0 = template.with_fit_vector_unchecked(&start);
    let mut w = ls_weights(design, &m0, false);
    let (mut theta, mut converged) = weighted_solve(design, template, &start, &w, active)?;
    let mut iterations = 1;
    if opts.horizontal && design.sx.iter().any(|&s| s > 0.0) {
        converged = false;
        let scale = covariance_sigmas(design, &template.with_fit_vector_unchecked(&theta), &w, active)?;
        while iterations < opts.max_iter {
            w = ls_weights(design, &template.with_fit_vector_unchecked(&theta), true);
            let (next, ok) = weighted_solve(design, template, &theta, &w, active)?;
            iterations += 1;
            let done = max_rel_change(&theta, &next, active, Some(&scale)) < opts.tol;
            theta = next;
            if done && ok {
                converged = true;
                break;
            }
        }
    }
    Ok(LsFit {
        theta,
        weights: w,
        iterations,
        converged,
    })
}

fn max_rel_change(old: &[f64], new: &[f64], active: &[usize], scale: Option<&[f64]>) -> f64 {
    active
        .iter()
        .map(|&j| {
            let floor = scale.map_or(0.0, |s| s[j]);
            let den = new[j].abs().max(floor).max(1e-300);
            (new[j] - old[j]).abs() / den
        })
        .fold(0.0, f64::max)
}

/// Weighted least squares (chi-square minimization).
pub fn fit_least_squares(data: &[DataPoint], template: &CurveModel, opts: &FitOptions) -> Result<FitResult> {
    let design = Design::new(data, template)?;
    let active = active_indices(template.n_addressable(), opts.y0);
    check_count(&design, &active)?;
    let fit = least_squares_core(&design, template, opts, &active)?;
    let model = template.with_fit_vector_unchecked(&fit.theta);
    let sigmas = covariance_sigmas(&design, &model, &fit.weights, &active)?;
    Ok(FitResult {
        log_posterior: log_posterior_design(&design, data, &model, Engine::LeastSquares),
        chi2: chi2(&design, &model),
        model,
        sigmas,
        sigma_source: SigmaSource::Covariance,
        weights: fit.weights,
        engine: Engine::LeastSquares,
        iterations: fit.iterations,
        converged: fit.converged,
        y0_mode: opts.y0,
    })
}

/// Poisson maximum likelihood for a background-free linear curve:
/// `alpha = sum u / sum w D`.
pub fn fit_poisson_mle(data: &[DataPoint]) -> Result<FitResult> {
    if data.is_empty() {
        return Err(Error::InvalidInput("no calibration points".into()));
    }
    let mut u_sum = CompensatedSum::new();
    let mut exposure = CompensatedSum::new();
    let mut weights = Vec::with_capacity(data.len());
    for (i, p) in data.iter().enumerate() {
        p.validate(i)?;
        let (Some(w), Some(u)) = (p.cells, p.aberrations) else {
            return Err(Error::InvalidData {
                index: i,
                reason: "Poisson fit needs cells and aberrations".into(),
            });
        };
        let d = p.total_dose();
        if !(d > 0.0) {
            return Err(Error::InvalidData {
                index: i,
                reason: "Poisson fit needs a positive dose".into(),
            });
        }
        u_sum.add(u as f64);
        exposure.add(w as f64 * d);
        weights.push(w as f64 * d);
    }
    let (u_sum, exposure) = (u_sum.value(), exposure.value());
    if !(exposure > 0.0) {
        return Err(Error::DegenerateDesign(exposure));
    }
    let alpha = u_sum / exposure;
    // curvature of the log-likelihood is sum u / alpha^2
    let sigma = if u_sum > 0.0 { u_sum.sqrt() / exposure } else { 1.0 / exposure };
    let model = CurveModel::new(CurveKind::LinearNeutron, vec![alpha])?.with_y0(0.0)?;
    let design = Design::new(data, &model)?;
    Ok(FitResult {
        log_posterior: log_posterior_design(&design, data, &model, Engine::PoissonMle),
        chi2: chi2(&design, &model),
        model,
        sigmas: vec![0.0, sigma],
        sigma_source: SigmaSource::CramerRao,
        weights,
        engine: Engine::PoissonMle,
        iterations: 0,
        converged: true,
        y0_mode: Y0Mode::Fixed,
    })
}

/// Robust Bayesian regression with weights [`weights::weight_g`], solved by
/// fixed-point iteration from the least-squares answer.
pub fn fit_robust_bayesian(data: &[DataPoint], template: &CurveModel, opts: &FitOptions) -> Result<FitResult> {
    fit_reweighted(data, template, opts, Engine::RobustBayesian)
}

/// Good-and-bad-data mixture regression; `phi` is the outlier probability.
pub fn fit_mixture(data: &[DataPoint], template: &CurveModel, phi: f64, opts: &FitOptions) -> Result<FitResult> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::InvalidInput(format!("outlier probability must lie in [0, 1], got {phi}")));
    }
    fit_reweighted(data, template, opts, Engine::Mixture { phi })
}

pub(crate) fn engine_weight(engine: Engine, r: f64, s: f64) -> f64 {
    match engine {
        Engine::RobustBayesian => weights::weight_g(r, s),
        Engine::Mixture { phi } => weights::weight_mixture(r, s, phi),
        Engine::LeastSquares | Engine::PoissonMle => 1.0 / (s * s),
    }
}

fn fit_reweighted(data: &[DataPoint], template: &CurveModel, opts: &FitOptions, engine: Engine) -> Result<FitResult> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidInput("tolerance must be > 0".into()));
    }
    let design = Design::new(data, template)?;
    let active = active_indices(template.n_addressable(), opts.y0);
    check_count(&design, &active)?;
    let ls_opts = FitOptions {
        horizontal: false,
        ..*opts
    };
    let ls = least_squares_core(&design, template, &ls_opts, &active)?;
    let ls_model = template.with_fit_vector_unchecked(&ls.theta);
    let scale = covariance_sigmas(&design, &ls_model, &ls.weights, &active)?;
    let mut theta = ls.theta;
    let mut converged = false;
    let mut iterations = 0;
    let weights_at = |theta: &[f64]| -> Vec<f64> {
        let m = template.with_fit_vector_unchecked(theta);
        design
            .residuals(&m)
            .iter()
            .zip(&design.s)
            .map(|(r, s)| engine_weight(engine, *r, *s))
            .collect()
    };
    while iterations < opts.max_iter {
        let w = weights_at(&theta);
        let (next, ok) = weighted_solve(&design, template, &theta, &w, &active)?;
        iterations += 1;
        if next.iter().any(|v| !v.is_finite()) {
            break;
        }
        let change = max_rel_change(&theta, &next, &active, Some(&scale));
        theta = next;
        if ok && change < opts.tol {
            converged = true;
            break;
        }
    }
    let model = template.with_fit_vector_unchecked(&theta);
    let weights = weights_at(&theta);
    let mut result = FitResult {
        log_posterior: log_posterior_design(&design, data, &model, engine),
        chi2: chi2(&design, &model),
        model,
        sigmas: vec![0.0; template.n_addressable()],
        sigma_source: SigmaSource::Unavailable,
        weights,
        engine,
        iterations,
        converged,
        y0_mode: opts.y0,
    };
    if converged {
        if let Ok(s) = uncertainties_hessian(data, &result) {
            result.sigmas = s;
            result.sigma_source = SigmaSource::Hessian;
        } else if let Ok(s) = uncertainties_cramer_rao(data, &result) {
            result.sigmas = s;
            result.sigma_source = SigmaSource::CramerRao;
        }
    }
    Ok(result)
}
