//! Calibration dose-response curves.
//!
//! Every curve maps a dose vector (Gy, one component per radiation type) to
//! an expected aberration frequency (aberrations/cell). Single-radiation
//! kinds take a one-component dose; [`CurveKind::CombinedMixed`] takes
//! `(D_n, D_g)`; the multi-radiation kinds take one component per radiation
//! type.
//!
//! Parameters are addressed through the *fit vector* `[Y0, params...]`:
//! index 0 is the background `Y0`, index `k >= 1` is `params[k - 1]`.
//!
//! The generalized curve stores, for each radiation `i` and each power
//! `j = 0..=n_i`, the block `[a_ij, b_ij, c_ij1 ... c_ijK]` and evaluates
//!
//! ```text
//! Y = Y0 + (Ymax - Y0) * sum_i sum_j ( a_ij + b_ij * D_i^j * exp(-sum_k c_ijk * D_i^m_ijk) )
//! ```
//!
//! `K` is called `exp_terms` here (the same letter names the Monte Carlo
//! repetition count elsewhere); the exponents `m_ijk` are structural and not
//! fitted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_Y0: f64 = 0.0005;
pub const DEFAULT_YMAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    /// `Y0 + alpha*D`
    LinearNeutron,
    /// `Y0 + beta*D + gamma*D^2`
    LinearQuadraticGamma,
    /// `Y0 + alpha*D_n + beta*D_g + gamma*D_g^2`
    CombinedMixed,
    /// `(Ymax-Y0)(1 - exp(-alpha*D)) + Y0`
    SaturatedLinear,
    /// `(Ymax-Y0)(1 - exp(-beta*D - gamma*D^2)) + Y0`
    SaturatedSigmoid,
    /// `(Ymax-Y0)(1 - exp(-a*D^n)) + Y0`
    AvramiSigmoid,
    /// `(Ymax-Y0) * alpha*D * exp(-alpha*D) + Y0`
    CriticalLinear,
    /// `(Ymax-Y0) * x * exp(-x) + Y0` with `x = beta*D + gamma*D^2`
    CriticalQuadratic,
    /// `Y0 + sum_j lambda_j D^j`, `j = 1..=n`
    Polynomial,
    /// `Y0 + sum_i sum_j lambda_ij D_i^j`
    MultiRadiationPolynomial,
    Generalized,
}

impl CurveKind {
    pub const ALL: [CurveKind; 11] = [
        CurveKind::LinearNeutron,
        CurveKind::LinearQuadraticGamma,
        CurveKind::CombinedMixed,
        CurveKind::SaturatedLinear,
        CurveKind::SaturatedSigmoid,
        CurveKind::AvramiSigmoid,
        CurveKind::CriticalLinear,
        CurveKind::CriticalQuadratic,
        CurveKind::Polynomial,
        CurveKind::MultiRadiationPolynomial,
        CurveKind::Generalized,
    ];

    /// Parameter count for kinds whose arity does not depend on structure.
    pub fn fixed_arity(self) -> Option<usize> {
        use CurveKind::*;
        match self {
            LinearNeutron | SaturatedLinear | CriticalLinear => Some(1),
            LinearQuadraticGamma | SaturatedSigmoid | AvramiSigmoid | CriticalQuadratic => Some(2),
            CombinedMixed => Some(3),
            Polynomial | MultiRadiationPolynomial | Generalized => None,
        }
    }

    /// Whether `Ymax` enters the curve.
    pub fn uses_ymax(self) -> bool {
        use CurveKind::*;
        matches!(
            self,
            SaturatedLinear
                | SaturatedSigmoid
                | AvramiSigmoid
                | CriticalLinear
                | CriticalQuadratic
                | Generalized
        )
    }

    /// Whether `Y` is linear in the fit vector `[Y0, params...]`.
    pub fn is_linear_in_params(self) -> bool {
        use CurveKind::*;
        matches!(
            self,
            LinearNeutron | LinearQuadraticGamma | CombinedMixed | Polynomial | MultiRadiationPolynomial
        )
    }

    pub fn name(self) -> &'static str {
        use CurveKind::*;
        match self {
            LinearNeutron => "linear_neutron",
            LinearQuadraticGamma => "linear_quadratic_gamma",
            CombinedMixed => "combined_mixed",
            SaturatedLinear => "saturated_linear",
            SaturatedSigmoid => "saturated_sigmoid",
            AvramiSigmoid => "avrami_sigmoid",
            CriticalLinear => "critical_linear",
            CriticalQuadratic => "critical_quadratic",
            Polynomial => "polynomial",
            MultiRadiationPolynomial => "multi_radiation_polynomial",
            Generalized => "generalized",
        }
    }
}

impl std::fmt::Display for CurveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CurveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CurveKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidCurve(format!("unknown curve kind `{s}`")))
    }
}

/// A calibration curve with its parameters. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CurveDocument", into = "CurveDocument")]
pub struct CurveModel {
    kind: CurveKind,
    params: Vec<f64>,
    y0: f64,
    ymax: f64,
    degrees: Vec<usize>,
    exp_terms: usize,
    exponents: Vec<f64>,
}

/// JSON document form of a curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveDocument {
    pub kind: CurveKind,
    pub params: Vec<f64>,
    #[serde(default = "default_y0")]
    pub y0: f64,
    #[serde(default = "default_ymax")]
    pub ymax: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radiation_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degrees: Vec<usize>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub exp_terms: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exponents: Vec<f64>,
}

fn default_y0() -> f64 {
    DEFAULT_Y0
}
fn default_ymax() -> f64 {
    DEFAULT_YMAX
}
fn is_zero(x: &usize) -> bool {
    *x == 0
}

impl TryFrom<CurveDocument> for CurveModel {
    type Error = Error;

    fn try_from(doc: CurveDocument) -> Result<Self> {
        let degrees = match doc.kind {
            CurveKind::Polynomial if doc.degrees.is_empty() => vec![doc.params.len()],
            _ => doc.degrees,
        };
        if let Some(r) = doc.radiation_count {
            let actual = match doc.kind {
                CurveKind::MultiRadiationPolynomial | CurveKind::Generalized => degrees.len(),
                CurveKind::CombinedMixed => 2,
                _ => 1,
            };
            if r != actual {
                return Err(Error::InvalidCurve(format!(
                    "radiation_count {r} disagrees with the curve structure ({actual})"
                )));
            }
        }
        CurveModel::from_parts(doc.kind, doc.params, doc.y0, doc.ymax, degrees, doc.exp_terms, doc.exponents)
    }
}

impl From<CurveModel> for CurveDocument {
    fn from(m: CurveModel) -> Self {
        let multi = matches!(m.kind, CurveKind::MultiRadiationPolynomial | CurveKind::Generalized);
        CurveDocument {
            kind: m.kind,
            radiation_count: multi.then_some(m.degrees.len()),
            degrees: if multi || m.kind == CurveKind::Polynomial { m.degrees } else { Vec::new() },
            params: m.params,
            y0: m.y0,
            ymax: m.ymax,
            exp_terms: m.exp_terms,
            exponents: m.exponents,
        }
    }
}

/// `d^p` with `0^0 = 1`.
#[inline]
fn pw(d: f64, p: f64) -> f64 {
    if p == 0.0 {
        1.0
    } else {
        d.powf(p)
    }
}

/// `d/dd (d^p)`.
#[inline]
fn dpw(d: f64, p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * d.powf(p - 1.0)
    }
}

impl CurveModel {
    /// Fixed-arity curve with default `Y0` and `Ymax`.
    pub fn new(kind: CurveKind, params: Vec<f64>) -> Result<Self> {
        if kind.fixed_arity().is_none() {
            return Err(Error::InvalidCurve(format!(
                "{kind} needs structural information; use the dedicated constructor"
            )));
        }
        Self::from_parts(kind, params, DEFAULT_Y0, DEFAULT_YMAX, Vec::new(), 0, Vec::new())
    }

    /// Fixed-arity curve with every parameter zero; used as a fitting template.
    pub fn template(kind: CurveKind) -> Result<Self> {
        let n = kind.fixed_arity().ok_or_else(|| {
            Error::InvalidCurve(format!("{kind} has no fixed arity; build the template explicitly"))
        })?;
        Self::new(kind, vec![0.0; n])
    }

    pub fn combined_mixed(alpha: f64, beta: f64, gamma: f64, y0: f64) -> Result<Self> {
        Self::new(CurveKind::CombinedMixed, vec![alpha, beta, gamma])?.with_y0(y0)
    }

    /// `Y0 + sum_j coeffs[j-1] D^j`.
    pub fn polynomial(coeffs: Vec<f64>) -> Result<Self> {
        let n = coeffs.len();
        Self::from_parts(CurveKind::Polynomial, coeffs, DEFAULT_Y0, DEFAULT_YMAX, vec![n], 0, Vec::new())
    }

    /// Per-radiation polynomials; `params` holds `lambda_ij` for radiation
    /// `i` in order, `j = 1..=degrees[i]`.
    pub fn multi_polynomial(degrees: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        Self::from_parts(
            CurveKind::MultiRadiationPolynomial,
            params,
            DEFAULT_Y0,
            DEFAULT_YMAX,
            degrees,
            0,
            Vec::new(),
        )
    }

    /// Generalized curve; see the module docs for the parameter layout.
    pub fn generalized(degrees: Vec<usize>, exp_terms: usize, params: Vec<f64>, exponents: Vec<f64>) -> Result<Self> {
        Self::from_parts(
            CurveKind::Generalized,
            params,
            DEFAULT_Y0,
            DEFAULT_YMAX,
            degrees,
            exp_terms,
            exponents,
        )
    }

    pub fn with_y0(self, y0: f64) -> Result<Self> {
        Self::from_parts(self.kind, self.params, y0, self.ymax, self.degrees, self.exp_terms, self.exponents)
    }

    pub fn with_ymax(self, ymax: f64) -> Result<Self> {
        Self::from_parts(self.kind, self.params, self.y0, ymax, self.degrees, self.exp_terms, self.exponents)
    }

    pub fn from_parts(
        kind: CurveKind,
        params: Vec<f64>,
        y0: f64,
        ymax: f64,
        degrees: Vec<usize>,
        exp_terms: usize,
        exponents: Vec<f64>,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidCurve(m));
        if !(y0.is_finite() && y0 >= 0.0) {
            return bad(format!("background Y0 must be finite and >= 0, got {y0}"));
        }
        if !ymax.is_finite() {
            return bad(format!("Ymax must be finite, got {ymax}"));
        }
        if kind.uses_ymax() && ymax <= y0 {
            return bad(format!("{kind} needs Ymax > Y0 (Ymax = {ymax}, Y0 = {y0})"));
        }
        if let Some((i, p)) = params.iter().enumerate().find(|(_, p)| !p.is_finite()) {
            return bad(format!("parameter {i} is not finite ({p})"));
        }
        let (degrees, exp_terms, exponents) = match kind {
            CurveKind::Polynomial => {
                if degrees.len() != 1 {
                    return bad("polynomial takes exactly one degree".into());
                }
                (degrees, 0, Vec::new())
            }
            CurveKind::MultiRadiationPolynomial => {
                if degrees.is_empty() {
                    return bad("multi-radiation polynomial needs at least one radiation type".into());
                }
                (degrees, 0, Vec::new())
            }
            CurveKind::Generalized => {
                if degrees.is_empty() {
                    return bad("generalized curve needs at least one radiation type".into());
                }
                let blocks: usize = degrees.iter().map(|n| n + 1).sum();
                if exponents.len() != blocks * exp_terms {
                    return bad(format!(
                        "generalized curve expects {} exponents, got {}",
                        blocks * exp_terms,
                        exponents.len()
                    ));
                }
                if let Some(m) = exponents.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
                    return bad(format!("exponents must be finite and >= 0, got {m}"));
                }
                (degrees, exp_terms, exponents)
            }
            _ => (Vec::new(), 0, Vec::new()),
        };
        let expected = match kind {
            CurveKind::Polynomial | CurveKind::MultiRadiationPolynomial => degrees.iter().sum(),
            CurveKind::Generalized => degrees.iter().map(|n| (n + 1) * (2 + exp_terms)).sum(),
            k => k.fixed_arity().unwrap_or(0),
        };
        if params.len() != expected {
            return bad(format!("{kind} expects {expected} parameters, got {}", params.len()));
        }
        let model = CurveModel {
            kind,
            params,
            y0,
            ymax,
            degrees,
            exp_terms,
            exponents,
        };
        if kind == CurveKind::Generalized {
            let zero = vec![0.0; model.radiation_count()];
            let bracket = model.generalized_bracket(&zero);
            let scale: f64 = 1.0 + model.params.iter().map(|p| p.abs()).sum::<f64>();
            if bracket.abs() > 1e-12 * scale {
                return bad(format!("generalized curve must reduce to Y0 at zero dose (bracket = {bracket:e})"));
            }
        }
        Ok(model)
    }

    pub fn kind(&self) -> CurveKind {
        self.kind
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn y0(&self) -> f64 {
        self.y0
    }
    pub fn ymax(&self) -> f64 {
        self.ymax
    }
    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }
    pub fn exp_terms(&self) -> usize {
        self.exp_terms
    }
    pub fn exponents(&self) -> &[f64] {
        &self.exponents
    }

    /// Number of dose components the curve consumes.
    pub fn radiation_count(&self) -> usize {
        match self.kind {
            CurveKind::CombinedMixed => 2,
            CurveKind::MultiRadiationPolynomial | CurveKind::Generalized => self.degrees.len(),
            _ => 1,
        }
    }

    /// Length of the fit vector `[Y0, params...]`.
    pub fn n_addressable(&self) -> usize {
        self.params.len() + 1
    }

    pub fn fit_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_addressable());
        v.push(self.y0);
        v.extend_from_slice(&self.params);
        v
    }

    /// Copy of the curve with the fit vector replaced, skipping validation.
    /// Fitting iterates may pass through values the public constructors
    /// reject (e.g. a momentarily negative `Y0`).
    pub(crate) fn with_fit_vector_unchecked(&self, v: &[f64]) -> CurveModel {
        debug_assert_eq!(v.len(), self.n_addressable());
        let mut m = self.clone();
        m.y0 = v[0];
        m.params.copy_from_slice(&v[1..]);
        m
    }

    /// Validated copy with a new fit vector.
    pub fn with_fit_vector(&self, v: &[f64]) -> Result<CurveModel> {
        if v.len() != self.n_addressable() {
            return Err(Error::InvalidCurve(format!(
                "fit vector has {} entries, expected {}",
                v.len(),
                self.n_addressable()
            )));
        }
        Self::from_parts(
            self.kind,
            v[1..].to_vec(),
            v[0],
            self.ymax,
            self.degrees.clone(),
            self.exp_terms,
            self.exponents.clone(),
        )
    }

    fn check_dose(&self, dose: &[f64]) -> Result<()> {
        let expected = self.radiation_count();
        if dose.len() != expected {
            return Err(Error::DoseArity {
                expected,
                got: dose.len(),
            });
        }
        if let Some(&d) = dose.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
            return Err(Error::NegativeDose(d));
        }
        Ok(())
    }

    /// Expected aberration frequency at `dose`.
    pub fn evaluate(&self, dose: &[f64]) -> Result<f64> {
        self.check_dose(dose)?;
        Ok(self.eval_unchecked(dose))
    }

    pub(crate) fn eval_unchecked(&self, dose: &[f64]) -> f64 {
        use CurveKind::*;
        let p = &self.params;
        let span = self.ymax - self.y0;
        match self.kind {
            LinearNeutron => self.y0 + p[0] * dose[0],
            LinearQuadraticGamma => {
                let d = dose[0];
                self.y0 + p[0] * d + p[1] * d * d
            }
            CombinedMixed => {
                let (dn, dg) = (dose[0], dose[1]);
                self.y0 + p[0] * dn + p[1] * dg + p[2] * dg * dg
            }
            SaturatedLinear => span * -(-p[0] * dose[0]).exp_m1() + self.y0,
            SaturatedSigmoid => {
                let d = dose[0];
                span * -(-(p[0] * d + p[1] * d * d)).exp_m1() + self.y0
            }
            AvramiSigmoid => span * -(-p[0] * pw(dose[0], p[1])).exp_m1() + self.y0,
            CriticalLinear => {
                let x = p[0] * dose[0];
                span * x * (-x).exp() + self.y0
            }
            CriticalQuadratic => {
                let d = dose[0];
                let x = p[0] * d + p[1] * d * d;
                span * x * (-x).exp() + self.y0
            }
            Polynomial | MultiRadiationPolynomial => {
                let mut y = self.y0;
                let mut k = 0;
                for (i, &n) in self.degrees.iter().enumerate() {
                    let d = dose[i];
                    let mut dj = 1.0;
                    for _ in 1..=n {
                        dj *= d;
                        y += p[k] * dj;
                        k += 1;
                    }
                }
                y
            }
            Generalized => {
                if dose.iter().all(|&d| d == 0.0) {
                    return self.y0;
                }
                self.y0 + span * self.generalized_bracket(dose)
            }
        }
    }

    /// Iterates the blocks of a generalized curve:
    /// `(radiation, power, param offset, exponent offset)`.
    fn generalized_blocks(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let stride = 2 + self.exp_terms;
        let k = self.exp_terms;
        self.degrees
            .iter()
            .enumerate()
            .flat_map(|(i, &n)| (0..=n).map(move |j| (i, j)))
            .enumerate()
            .map(move |(b, (i, j))| (i, j, b * stride, b * k))
    }

    fn exp_arg(&self, d: f64, off: usize, eoff: usize) -> f64 {
        (0..self.exp_terms)
            .map(|k| self.params[off + 2 + k] * pw(d, self.exponents[eoff + k]))
            .sum()
    }

    fn generalized_bracket(&self, dose: &[f64]) -> f64 {
        self.generalized_blocks()
            .map(|(i, j, off, eoff)| {
                let d = dose[i];
                let a = self.params[off];
                let b = self.params[off + 1];
                a + b * pw(d, j as f64) * (-self.exp_arg(d, off, eoff)).exp()
            })
            .sum()
    }

    /// `dY/dD_component`.
    pub fn derivative_wrt_dose(&self, dose: &[f64], component: usize) -> Result<f64> {
        self.check_dose(dose)?;
        if component >= dose.len() {
            return Err(Error::DoseArity {
                expected: self.radiation_count(),
                got: component + 1,
            });
        }
        Ok(self.dose_derivative_unchecked(dose, component))
    }

    pub(crate) fn dose_derivative_unchecked(&self, dose: &[f64], c: usize) -> f64 {
        use CurveKind::*;
        let p = &self.params;
        let span = self.ymax - self.y0;
        match self.kind {
            LinearNeutron => p[0],
            LinearQuadraticGamma => p[0] + 2.0 * p[1] * dose[0],
            CombinedMixed => {
                if c == 0 {
                    p[0]
                } else {
                    p[1] + 2.0 * p[2] * dose[1]
                }
            }
            SaturatedLinear => span * p[0] * (-p[0] * dose[0]).exp(),
            SaturatedSigmoid => {
                let d = dose[0];
                span * (p[0] + 2.0 * p[1] * d) * (-(p[0] * d + p[1] * d * d)).exp()
            }
            AvramiSigmoid => {
                let d = dose[0];
                span * p[0] * dpw(d, p[1]) * (-p[0] * pw(d, p[1])).exp()
            }
            CriticalLinear => {
                let x = p[0] * dose[0];
                span * p[0] * (1.0 - x) * (-x).exp()
            }
            CriticalQuadratic => {
                let d = dose[0];
                let x = p[0] * d + p[1] * d * d;
                span * (p[0] + 2.0 * p[1] * d) * (1.0 - x) * (-x).exp()
            }
            Polynomial | MultiRadiationPolynomial => {
                let mut k: usize = self.degrees[..c].iter().sum();
                let d = dose[c];
                let mut total = 0.0;
                let mut djm1 = 1.0;
                for j in 1..=self.degrees[c] {
                    total += p[k] * j as f64 * djm1;
                    djm1 *= d;
                    k += 1;
                }
                total
            }
            Generalized => {
                let d = dose[c];
                let mut total = 0.0;
                for (i, j, off, eoff) in self.generalized_blocks() {
                    if i != c {
                        continue;
                    }
                    let b = p[off + 1];
                    let jf = j as f64;
                    let e = (-self.exp_arg(d, off, eoff)).exp();
                    let darg: f64 = (0..self.exp_terms)
                        .map(|k| p[off + 2 + k] * dpw(d, self.exponents[eoff + k]))
                        .sum();
                    let dj = pw(d, jf);
                    let ddj = dpw(d, jf);
                    let inner = if dj == 0.0 { ddj } else { ddj - dj * darg };
                    total += b * inner * e;
                }
                span * total
            }
        }
    }

    /// `dY/d(fit vector[index])`; index 0 is `Y0`.
    pub fn derivative_wrt_param(&self, dose: &[f64], index: usize) -> Result<f64> {
        self.check_dose(dose)?;
        if index >= self.n_addressable() {
            return Err(Error::ParamIndex {
                index,
                len: self.n_addressable(),
            });
        }
        let mut g = vec![0.0; self.n_addressable()];
        self.param_gradient_unchecked(dose, &mut g);
        Ok(g[index])
    }

    /// Fills `out` with `dY/d(fit vector)`.
    pub(crate) fn param_gradient_unchecked(&self, dose: &[f64], out: &mut [f64]) {
        use CurveKind::*;
        let p = &self.params;
        let span = self.ymax - self.y0;
        match self.kind {
            LinearNeutron => {
                out[0] = 1.0;
                out[1] = dose[0];
            }
            LinearQuadraticGamma => {
                let d = dose[0];
                out[0] = 1.0;
                out[1] = d;
                out[2] = d * d;
            }
            CombinedMixed => {
                out[0] = 1.0;
                out[1] = dose[0];
                out[2] = dose[1];
                out[3] = dose[1] * dose[1];
            }
            SaturatedLinear => {
                let d = dose[0];
                let e = (-p[0] * d).exp();
                out[0] = e;
                out[1] = span * d * e;
            }
            SaturatedSigmoid => {
                let d = dose[0];
                let e = (-(p[0] * d + p[1] * d * d)).exp();
                out[0] = e;
                out[1] = span * d * e;
                out[2] = span * d * d * e;
            }
            AvramiSigmoid => {
                let d = dose[0];
                let dn = pw(d, p[1]);
                let e = (-p[0] * dn).exp();
                out[0] = e;
                out[1] = span * dn * e;
                out[2] = if d > 0.0 { span * p[0] * dn * d.ln() * e } else { 0.0 };
            }
            CriticalLinear => {
                let d = dose[0];
                let x = p[0] * d;
                let e = (-x).exp();
                out[0] = 1.0 - x * e;
                out[1] = span * d * (1.0 - x) * e;
            }
            CriticalQuadratic => {
                let d = dose[0];
                let x = p[0] * d + p[1] * d * d;
                let e = (-x).exp();
                out[0] = 1.0 - x * e;
                out[1] = span * d * (1.0 - x) * e;
                out[2] = span * d * d * (1.0 - x) * e;
            }
            Polynomial | MultiRadiationPolynomial => {
                out[0] = 1.0;
                let mut k = 1;
                for (i, &n) in self.degrees.iter().enumerate() {
                    let mut dj = 1.0;
                    for _ in 1..=n {
                        dj *= dose[i];
                        out[k] = dj;
                        k += 1;
                    }
                }
            }
            Generalized => {
                let bracket = if dose.iter().all(|&d| d == 0.0) {
                    0.0
                } else {
                    self.generalized_bracket(dose)
                };
                out[0] = 1.0 - bracket;
                for (i, j, off, eoff) in self.generalized_blocks() {
                    let d = dose[i];
                    let b = p[off + 1];
                    let dj = pw(d, j as f64);
                    let e = (-self.exp_arg(d, off, eoff)).exp();
                    out[1 + off] = span;
                    out[2 + off] = span * dj * e;
                    for k in 0..self.exp_terms {
                        out[3 + off + k] = -span * b * dj * pw(d, self.exponents[eoff + k]) * e;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn split_curve() -> CurveModel {
        CurveModel::combined_mixed(0.832, 0.0164, 0.0492, 0.0005).unwrap()
    }

    #[test]
    fn combined_mixed_reference_values() {
        let m = split_curve();
        assert_eq!(m.evaluate(&[0.0, 0.0]).unwrap(), 0.0005);
        let y = m.evaluate(&[1.0, 1.0]).unwrap();
        assert!((y - 0.8981).abs() < 1e-12);
    }

    #[test]
    fn saturated_linear_reaches_ceiling() {
        let m = CurveModel::new(CurveKind::SaturatedLinear, vec![0.3]).unwrap();
        let y = m.evaluate(&[1e6]).unwrap();
        assert!((y - m.ymax()).abs() < 1e-6);
        assert!(y <= m.ymax());
    }

    #[test]
    fn dose_derivative_examples() {
        let lin = CurveModel::new(CurveKind::LinearNeutron, vec![0.5]).unwrap();
        assert_eq!(lin.derivative_wrt_dose(&[3.7], 0).unwrap(), 0.5);
        let d = split_curve().derivative_wrt_dose(&[0.0, 2.0], 1).unwrap();
        assert!((d - 0.2132).abs() < 1e-12);
        let lq = CurveModel::new(CurveKind::LinearQuadraticGamma, vec![0.02, 0.06]).unwrap();
        assert_eq!(lq.derivative_wrt_dose(&[0.0], 0).unwrap(), 0.02);
    }

    #[test]
    fn param_derivative_examples() {
        let m = split_curve();
        assert_eq!(m.derivative_wrt_param(&[2.0, 5.0], 1).unwrap(), 2.0);
        assert_eq!(m.derivative_wrt_param(&[0.0, 3.0], 3).unwrap(), 9.0);
        let av = CurveModel::new(CurveKind::AvramiSigmoid, vec![0.1, 2.0])
            .unwrap()
            .with_y0(0.0)
            .unwrap();
        let d = av.derivative_wrt_param(&[1.0], 1).unwrap();
        assert!((d - (-0.1f64).exp()).abs() < 1e-15);
        assert!(matches!(m.derivative_wrt_param(&[0.0, 0.0], 4), Err(Error::ParamIndex { .. })));
    }

    #[test]
    fn construction_errors() {
        assert!(CurveModel::new(CurveKind::CombinedMixed, vec![1.0, 2.0]).is_err());
        assert!(CurveModel::new(CurveKind::SaturatedLinear, vec![1.0]).unwrap().with_ymax(0.0001).is_err());
        assert!(CurveModel::new(CurveKind::LinearNeutron, vec![1.0]).unwrap().with_y0(-1.0).is_err());
        assert!(CurveModel::new(CurveKind::LinearNeutron, vec![f64::NAN]).is_err());
        // Generalized curve whose bracket does not vanish at zero dose
        assert!(CurveModel::generalized(vec![0], 0, vec![0.5, 0.0], vec![]).is_err());
    }

    #[test]
    fn evaluation_errors() {
        let m = split_curve();
        assert!(matches!(m.evaluate(&[1.0]), Err(Error::DoseArity { expected: 2, got: 1 })));
        assert!(matches!(m.evaluate(&[1.0, -0.1]), Err(Error::NegativeDose(_))));
    }

    #[test]
    fn critical_curves_rise_then_fall() {
        for m in [
            CurveModel::new(CurveKind::CriticalLinear, vec![0.2]).unwrap(),
            CurveModel::new(CurveKind::CriticalQuadratic, vec![0.05, 0.02]).unwrap(),
        ] {
            let ys: Vec<f64> = (0..=4000).map(|i| m.evaluate(&[i as f64 * 0.05]).unwrap()).collect();
            let k = ys.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert!(k > 0 && k < ys.len() - 1);
            assert!(ys[..=k].windows(2).all(|w| w[1] >= w[0]));
            assert!(ys[k..].windows(2).all(|w| w[1] <= w[0]));
            assert!((m.evaluate(&[1e4]).unwrap() - m.y0()).abs() < 1e-12);
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = CurveModel::combined_mixed(0.1 + 0.2, 1.0 / 3.0, std::f64::consts::E * 1e-7, 0.000_512_345_678_9)
            .unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: CurveModel = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
        for (a, b) in m.fit_vector().iter().zip(back.fit_vector()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let doc: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(doc["kind"], "combined_mixed");
    }

    #[test]
    fn json_rejects_wrong_arity() {
        let r: std::result::Result<CurveModel, _> =
            serde_json::from_str(r#"{"kind":"combined_mixed","params":[1,2],"y0":0.0005,"ymax":1}"#);
        assert!(r.is_err());
    }

    /// Generalized curve built to reproduce a multi-radiation polynomial.
    fn generalized_polynomial(degrees: &[usize], lambdas: &[f64], y0: f64, ymax: f64) -> CurveModel {
        let span = ymax - y0;
        let mut params = Vec::new();
        let mut exps = Vec::new();
        let mut k = 0;
        for &n in degrees {
            for j in 0..=n {
                params.push(0.0);
                params.push(if j == 0 { 0.0 } else { lambdas[k + j - 1] / span });
                params.push(0.0);
                exps.push(1.0);
            }
            k += n;
        }
        CurveModel::generalized(degrees.to_vec(), 1, params, exps)
            .unwrap()
            .with_y0(y0)
            .unwrap()
            .with_ymax(ymax)
            .unwrap()
    }

    fn sigmoid_generalized(cs: &[f64], ms: &[f64], y0: f64) -> CurveModel {
        let mut params = vec![1.0, -1.0];
        params.extend_from_slice(cs);
        CurveModel::generalized(vec![0], cs.len(), params, ms.to_vec())
            .unwrap()
            .with_y0(y0)
            .unwrap()
    }

    fn critical_generalized(b: &[f64], ms: &[f64], y0: f64) -> CurveModel {
        // power j carries lambda_b = b[j-1] and the shared exponent coefficients
        let mut params = vec![0.0, 0.0];
        params.extend(std::iter::repeat_n(0.0, b.len()));
        for &bj in b {
            params.push(0.0);
            params.push(bj);
            params.extend_from_slice(b);
        }
        CurveModel::generalized(vec![b.len()], b.len(), params, ms.repeat(b.len() + 1))
            .unwrap()
            .with_y0(y0)
            .unwrap()
    }

    fn central_diff<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-3)
    }

    fn any_single_curve() -> impl Strategy<Value = CurveModel> {
        let y0 = 0.0..0.01f64;
        prop_oneof![
            (y0.clone(), 0.01..2.0f64).prop_map(|(y, a)| CurveModel::new(CurveKind::LinearNeutron, vec![a])
                .unwrap()
                .with_y0(y)
                .unwrap()),
            (y0.clone(), 0.0..0.5f64, 0.0..0.2f64).prop_map(|(y, b, g)| CurveModel::new(
                CurveKind::LinearQuadraticGamma,
                vec![b, g]
            )
            .unwrap()
            .with_y0(y)
            .unwrap()),
            (y0.clone(), 0.01..2.0f64).prop_map(|(y, a)| CurveModel::new(CurveKind::SaturatedLinear, vec![a])
                .unwrap()
                .with_y0(y)
                .unwrap()),
            (y0.clone(), 0.0..0.5f64, 0.0..0.2f64).prop_map(|(y, b, g)| CurveModel::new(
                CurveKind::SaturatedSigmoid,
                vec![b, g]
            )
            .unwrap()
            .with_y0(y)
            .unwrap()),
            (y0.clone(), 0.01..1.0f64, 1.0..3.0f64).prop_map(|(y, a, n)| CurveModel::new(
                CurveKind::AvramiSigmoid,
                vec![a, n]
            )
            .unwrap()
            .with_y0(y)
            .unwrap()),
            (y0.clone(), 0.01..2.0f64).prop_map(|(y, a)| CurveModel::new(CurveKind::CriticalLinear, vec![a])
                .unwrap()
                .with_y0(y)
                .unwrap()),
            (y0.clone(), 0.0..0.5f64, 0.0..0.2f64).prop_map(|(y, b, g)| CurveModel::new(
                CurveKind::CriticalQuadratic,
                vec![b, g]
            )
            .unwrap()
            .with_y0(y)
            .unwrap()),
            (y0, proptest::collection::vec(-0.5..0.5f64, 0..5)).prop_map(|(y, c)| CurveModel::polynomial(c)
                .unwrap()
                .with_y0(y)
                .unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn zero_dose_is_background(m in any_single_curve()) {
            prop_assert_eq!(m.evaluate(&[0.0]).unwrap(), m.y0());
        }

        #[test]
        fn dose_derivative_matches_finite_differences(m in any_single_curve(), d in 0.05..8.0f64) {
            let a = m.derivative_wrt_dose(&[d], 0).unwrap();
            let fd = central_diff(|x| m.evaluate(&[x]).unwrap(), d);
            prop_assert!(close(a, fd, 1e-5), "{} vs {}", a, fd);
        }

        #[test]
        fn param_derivatives_match_finite_differences(m in any_single_curve(), d in 0.05..8.0f64) {
            let v = m.fit_vector();
            for idx in 0..v.len() {
                let a = m.derivative_wrt_param(&[d], idx).unwrap();
                let fd = central_diff(|x| {
                    let mut w = v.clone();
                    w[idx] = x;
                    m.with_fit_vector_unchecked(&w).eval_unchecked(&[d])
                }, v[idx]);
                prop_assert!(close(a, fd, 1e-5), "param {}: {} vs {}", idx, a, fd);
            }
        }

        #[test]
        fn saturated_kinds_are_monotone_and_bounded(m in any_single_curve()) {
            if matches!(m.kind(), CurveKind::SaturatedLinear | CurveKind::SaturatedSigmoid | CurveKind::AvramiSigmoid) {
                let mut prev = m.y0();
                for i in 1..=400 {
                    let y = m.evaluate(&[i as f64 * 0.25]).unwrap();
                    prop_assert!(y >= prev && y <= m.ymax());
                    prev = y;
                }
            }
        }

        #[test]
        fn multi_radiation_derivatives(l in proptest::collection::vec(-0.5..0.5f64, 5), dn in 0.1..4.0f64, dg in 0.1..4.0f64) {
            let m = CurveModel::multi_polynomial(vec![2, 3], l).unwrap();
            prop_assert_eq!(m.evaluate(&[0.0, 0.0]).unwrap(), m.y0());
            for c in 0..2 {
                let a = m.derivative_wrt_dose(&[dn, dg], c).unwrap();
                let fd = central_diff(|x| {
                    let mut d = [dn, dg];
                    d[c] = x;
                    m.evaluate(&d).unwrap()
                }, [dn, dg][c]);
                prop_assert!(close(a, fd, 1e-5));
            }
        }

        #[test]
        fn generalized_reduces_to_polynomial(l in proptest::collection::vec(-0.5..0.5f64, 3), y0 in 0.0..0.01f64) {
            let poly = CurveModel::multi_polynomial(vec![1, 2], l.clone()).unwrap().with_y0(y0).unwrap();
            let gen = generalized_polynomial(&[1, 2], &l, y0, 1.0);
            for i in 0..30 {
                for j in 0..30 {
                    let d = [i as f64 * 0.3, j as f64 * 0.3];
                    prop_assert!((poly.evaluate(&d).unwrap() - gen.evaluate(&d).unwrap()).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn generalized_reduces_to_sigmoids(a in 0.01..2.0f64, b in 0.0..0.5f64, g in 0.0..0.2f64, n in 0.5..3.0f64, y0 in 0.0..0.01f64) {
            let pairs = [
                (CurveModel::new(CurveKind::SaturatedLinear, vec![a]).unwrap(), sigmoid_generalized(&[a], &[1.0], y0)),
                (CurveModel::new(CurveKind::SaturatedSigmoid, vec![b, g]).unwrap(), sigmoid_generalized(&[b, g], &[1.0, 2.0], y0)),
                (CurveModel::new(CurveKind::AvramiSigmoid, vec![a, n]).unwrap(), sigmoid_generalized(&[a], &[n], y0)),
            ];
            for (plain, gen) in pairs {
                let plain = plain.with_y0(y0).unwrap();
                for i in 0..200 {
                    let d = [i as f64 * 0.1];
                    prop_assert!((plain.evaluate(&d).unwrap() - gen.evaluate(&d).unwrap()).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn generalized_reduces_to_critical(a in 0.01..2.0f64, b in 0.0..0.5f64, g in 0.0..0.2f64, y0 in 0.0..0.01f64) {
            let pairs = [
                (CurveModel::new(CurveKind::CriticalLinear, vec![a]).unwrap(), critical_generalized(&[a], &[1.0], y0)),
                (CurveModel::new(CurveKind::CriticalQuadratic, vec![b, g]).unwrap(), critical_generalized(&[b, g], &[1.0, 2.0], y0)),
            ];
            for (plain, gen) in pairs {
                let plain = plain.with_y0(y0).unwrap();
                for i in 0..200 {
                    let d = [i as f64 * 0.1];
                    prop_assert!((plain.evaluate(&d).unwrap() - gen.evaluate(&d).unwrap()).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn generalized_derivatives(a in 0.01..2.0f64, b in 0.01..0.5f64, g in 0.01..0.2f64, d in 0.1..6.0f64) {
            let gens = [
                critical_generalized(&[b, g], &[1.0, 2.0], 0.001),
                sigmoid_generalized(&[a], &[1.5], 0.001),
            ];
            for gen in gens {
                let an = gen.derivative_wrt_dose(&[d], 0).unwrap();
                let fd = central_diff(|x| gen.evaluate(&[x]).unwrap(), d);
                prop_assert!(close(an, fd, 1e-5), "{} vs {}", an, fd);
                let v = gen.fit_vector();
                for idx in 0..v.len() {
                    let an = gen.derivative_wrt_param(&[d], idx).unwrap();
                    let fd = central_diff(|x| {
                        let mut w = v.clone();
                        w[idx] = x;
                        gen.with_fit_vector_unchecked(&w).eval_unchecked(&[d])
                    }, v[idx]);
                    prop_assert!(close(an, fd, 1e-5), "param {}: {} vs {}", idx, an, fd);
                }
            }
        }
    }
}
