//! Priors on the gamma fraction `theta = D_g/(D_g + D_n) = 1/(rho + 1)` and
//! on calibration-curve parameters.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{golden_max, norm_cdf};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
/// Half-width of the effective support of Gaussian priors, in standard deviations.
const TAIL_SIGMAS: f64 = 12.0;

/// `theta = 1/(rho + 1)`.
pub fn theta_from_rho(rho: f64) -> Result<f64> {
    if !(rho >= 0.0) {
        return Err(Error::InvalidInput(format!("rho must be >= 0, got {rho}")));
    }
    Ok(1.0 / (rho + 1.0))
}

/// `rho = (1 - theta)/theta`.
pub fn rho_from_theta(theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::ThetaOutOfRange(theta));
    }
    Ok((1.0 - theta) / theta)
}

fn phi(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Prior on the gamma fraction. Every continuous variant is normalized on (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaPrior {
    /// Normal in `theta`, truncated to (0, 1).
    #[serde(rename = "gauss_theta")]
    GaussianTheta { theta_hat: f64, sigma: f64 },
    /// Normal in `rho`, carried into `theta` coordinates and truncated to `rho > 0`.
    #[serde(rename = "gauss_rho")]
    GaussianRhoTransformed { rho_hat: f64, sigma: f64 },
    /// `6 theta (1 - theta)`.
    #[serde(rename = "beta")]
    BetaUninformative,
    Uniform { min: f64, max: f64 },
    /// Exactly known `theta`.
    PointMass { theta: f64 },
}

impl ThetaPrior {
    pub fn gaussian_theta(theta_hat: f64, sigma: f64) -> Result<Self> {
        let p = ThetaPrior::GaussianTheta { theta_hat, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn gaussian_rho(rho_hat: f64, sigma: f64) -> Result<Self> {
        let p = ThetaPrior::GaussianRhoTransformed { rho_hat, sigma };
        p.validate()?;
        Ok(p)
    }

    /// Normal prior in `rho` centred on the ratio implied by `theta_hat`.
    pub fn gaussian_rho_at_theta(theta_hat: f64, sigma_rho: f64) -> Result<Self> {
        Self::gaussian_rho(rho_from_theta(theta_hat)?, sigma_rho)
    }

    pub fn uniform(min: f64, max: f64) -> Result<Self> {
        let p = ThetaPrior::Uniform { min, max };
        p.validate()?;
        Ok(p)
    }

    pub fn point_mass(theta: f64) -> Result<Self> {
        let p = ThetaPrior::PointMass { theta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPrior(m));
        match *self {
            ThetaPrior::GaussianTheta { theta_hat, sigma } => {
                if !theta_hat.is_finite() || !(sigma > 0.0 && sigma.is_finite()) {
                    return bad(format!("gauss_theta needs finite theta_hat and sigma > 0, got ({theta_hat}, {sigma})"));
                }
            }
            ThetaPrior::GaussianRhoTransformed { rho_hat, sigma } => {
                if !rho_hat.is_finite() || !(sigma > 0.0 && sigma.is_finite()) {
                    return bad(format!("gauss_rho needs finite rho_hat and sigma > 0, got ({rho_hat}, {sigma})"));
                }
            }
            ThetaPrior::BetaUninformative => {}
            ThetaPrior::Uniform { min, max } => {
                if !(0.0 <= min && min < max && max <= 1.0) {
                    return bad(format!("uniform needs 0 <= min < max <= 1, got [{min}, {max}]"));
                }
            }
            ThetaPrior::PointMass { theta } => {
                if !(0.0..=1.0).contains(&theta) {
                    return Err(Error::ThetaOutOfRange(theta));
                }
            }
        }
        if let Some(z) = self.normalizer() {
            if !(z > 0.0) {
                return bad("prior has no mass on (0, 1)".into());
            }
        }
        Ok(())
    }

    pub fn is_point_mass(&self) -> bool {
        matches!(self, ThetaPrior::PointMass { .. })
    }

    fn normalizer(&self) -> Option<f64> {
        match *self {
            ThetaPrior::GaussianTheta { theta_hat, sigma } => {
                Some(norm_cdf((1.0 - theta_hat) / sigma) - norm_cdf(-theta_hat / sigma))
            }
            ThetaPrior::GaussianRhoTransformed { rho_hat, sigma } => Some(norm_cdf(rho_hat / sigma)),
            _ => None,
        }
    }

    /// Normalized density at `theta` in (0, 1). Errors for a point mass.
    pub fn density(&self, theta: f64) -> Result<f64> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::ThetaOutOfRange(theta));
        }
        Ok(self.density_unchecked(theta))
    }

    pub(crate) fn density_unchecked(&self, theta: f64) -> f64 {
        match *self {
            ThetaPrior::GaussianTheta { theta_hat, sigma } => {
                phi((theta - theta_hat) / sigma) / (sigma * self.normalizer().unwrap_or(1.0))
            }
            ThetaPrior::GaussianRhoTransformed { rho_hat, sigma } => {
                let rho = 1.0 / theta - 1.0;
                phi((rho - rho_hat) / sigma) / (sigma * theta * theta * self.normalizer().unwrap_or(1.0))
            }
            ThetaPrior::BetaUninformative => 6.0 * theta * (1.0 - theta),
            ThetaPrior::Uniform { min, max } => {
                if (min..=max).contains(&theta) {
                    1.0 / (max - min)
                } else {
                    0.0
                }
            }
            ThetaPrior::PointMass { theta: t } => {
                if theta == t {
                    f64::INFINITY
                } else {
                    0.0
                }
            }
        }
    }

    /// Cumulative distribution on [0, 1].
    pub fn cdf(&self, theta: f64) -> f64 {
        let t = theta.clamp(0.0, 1.0);
        match *self {
            ThetaPrior::GaussianTheta { theta_hat, sigma } => {
                let z = self.normalizer().unwrap_or(1.0);
                ((norm_cdf((t - theta_hat) / sigma) - norm_cdf(-theta_hat / sigma)) / z).clamp(0.0, 1.0)
            }
            ThetaPrior::GaussianRhoTransformed { rho_hat, sigma } => {
                if t <= 0.0 {
                    return 0.0;
                }
                let z = self.normalizer().unwrap_or(1.0);
                let rho = 1.0 / t - 1.0;
                // mass with rho' >= rho, using the upper tail to keep precision
                (norm_cdf((rho_hat - rho) / sigma) / z).clamp(0.0, 1.0)
            }
            ThetaPrior::BetaUninformative => t * t * (3.0 - 2.0 * t),
            ThetaPrior::Uniform { min, max } => ((t - min) / (max - min)).clamp(0.0, 1.0),
            ThetaPrior::PointMass { theta: t0 } => {
                if t >= t0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Interval outside which the density is negligible (below `exp(-72)`
    /// of its peak for Gaussian kinds).
    pub fn support(&self) -> (f64, f64) {
        match *self {
            ThetaPrior::GaussianTheta { theta_hat, sigma } => (
                (theta_hat - TAIL_SIGMAS * sigma).max(0.0),
                (theta_hat + TAIL_SIGMAS * sigma).min(1.0),
            ),
            ThetaPrior::GaussianRhoTransformed { rho_hat, sigma } => {
                let lo = (rho_hat - TAIL_SIGMAS * sigma).max(0.0);
                let hi = rho_hat + TAIL_SIGMAS * sigma;
                (1.0 / (hi + 1.0), 1.0 / (lo + 1.0))
            }
            ThetaPrior::BetaUninformative => (0.0, 1.0),
            ThetaPrior::Uniform { min, max } => (min, max),
            ThetaPrior::PointMass { theta } => (theta, theta),
        }
    }

    /// Largest density value on the support.
    pub fn p_max(&self) -> f64 {
        match *self {
            ThetaPrior::GaussianTheta { theta_hat, .. } => {
                self.density_unchecked(theta_hat.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
            }
            ThetaPrior::GaussianRhoTransformed { .. } => {
                let (lo, hi) = self.support();
                let lo = lo.max(1e-300);
                let n = 256;
                let mut best = lo;
                let mut best_v = 0.0;
                for k in 0..=n {
                    let t = lo + (hi - lo) * k as f64 / n as f64;
                    let v = self.density_unchecked(t.clamp(1e-300, 1.0 - f64::EPSILON));
                    if v > best_v {
                        best_v = v;
                        best = t;
                    }
                }
                let step = (hi - lo) / n as f64;
                let a = (best - step).max(lo);
                let b = (best + step).min(hi);
                let t = golden_max(
                    |t| self.density_unchecked(t.clamp(1e-300, 1.0 - f64::EPSILON)),
                    a,
                    b,
                    1e-12 * (b - a).max(1e-300),
                );
                best_v.max(self.density_unchecked(t.clamp(1e-300, 1.0 - f64::EPSILON)))
            }
            ThetaPrior::BetaUninformative => 1.5,
            ThetaPrior::Uniform { min, max } => 1.0 / (max - min),
            ThetaPrior::PointMass { .. } => f64::INFINITY,
        }
    }

    /// Draws by rejection against `p_max` over the effective support.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if let ThetaPrior::PointMass { theta } = *self {
            return theta;
        }
        let envelope = self.p_max() * (1.0 + 1e-9);
        self.sample_with_envelope(rng, envelope)
    }

    /// Rejection sampling with a precomputed envelope, for hot loops.
    pub fn sample_with_envelope<R: Rng + ?Sized>(&self, rng: &mut R, envelope: f64) -> f64 {
        if let ThetaPrior::PointMass { theta } = *self {
            return theta;
        }
        let (lo, hi) = self.support();
        loop {
            let t = lo + (hi - lo) * rng.random::<f64>();
            if !(t > 0.0 && t < 1.0) {
                continue;
            }
            if rng.random::<f64>() * envelope < self.density_unchecked(t) {
                return t;
            }
        }
    }

    /// Prior mean.
    pub fn mean(&self) -> f64 {
        match *self {
            ThetaPrior::BetaUninformative => 0.5,
            ThetaPrior::Uniform { min, max } => 0.5 * (min + max),
            ThetaPrior::PointMass { theta } => theta,
            ThetaPrior::GaussianTheta { theta_hat, sigma } => {
                let z = self.normalizer().unwrap_or(1.0);
                theta_hat + sigma * (phi(-theta_hat / sigma) - phi((1.0 - theta_hat) / sigma)) / z
            }
            ThetaPrior::GaussianRhoTransformed { .. } => {
                let (lo, hi) = self.support();
                let cfg = crate::numeric::QuadConfig::default();
                // E[theta] = int (1 - F)
                lo + crate::numeric::integrate(|t| 1.0 - self.cdf(t), lo, hi, &cfg)
            }
        }
    }
}

/// Prior on a calibration-curve parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamPrior {
    /// Shape `k`, rate `z`; mean `k/z`.
    Gamma { k: f64, z: f64 },
    Gaussian { mean: f64, sd: f64 },
    PointMass { value: f64 },
}

/// Ready-to-sample form of a [`ParamPrior`].
#[derive(Debug, Clone, Copy)]
pub enum ParamSampler {
    Gamma(Gamma<f64>),
    Gaussian(Normal<f64>),
    Fixed(f64),
}

impl ParamSampler {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ParamSampler::Gamma(g) => g.sample(rng),
            ParamSampler::Gaussian(n) => n.sample(rng),
            ParamSampler::Fixed(v) => *v,
        }
    }
}

impl ParamPrior {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ParamPrior::Gamma { k, z } if !(k > 0.0 && z > 0.0 && k.is_finite() && z.is_finite()) => {
                Err(Error::InvalidPrior(format!("gamma prior needs k > 0 and z > 0, got ({k}, {z})")))
            }
            ParamPrior::Gaussian { mean, sd } if !(mean.is_finite() && sd > 0.0 && sd.is_finite()) => {
                Err(Error::InvalidPrior(format!("gaussian prior needs sd > 0, got ({mean}, {sd})")))
            }
            ParamPrior::PointMass { value } if !value.is_finite() => {
                Err(Error::InvalidPrior(format!("point mass must be finite, got {value}")))
            }
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            ParamPrior::Gamma { k, z } => k / z,
            ParamPrior::Gaussian { mean, .. } => mean,
            ParamPrior::PointMass { value } => value,
        }
    }

    pub fn is_point_mass(&self) -> bool {
        matches!(self, ParamPrior::PointMass { .. })
    }

    pub fn sampler(&self) -> Result<ParamSampler> {
        self.validate()?;
        let bad = |e: String| Error::InvalidPrior(e);
        Ok(match *self {
            ParamPrior::Gamma { k, z } => ParamSampler::Gamma(Gamma::new(k, 1.0 / z).map_err(|e| bad(e.to_string()))?),
            ParamPrior::Gaussian { mean, sd } => {
                ParamSampler::Gaussian(Normal::new(mean, sd).map_err(|e| bad(e.to_string()))?)
            }
            ParamPrior::PointMass { value } => ParamSampler::Fixed(value),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        Ok(self.sampler()?.draw(rng))
    }
}
