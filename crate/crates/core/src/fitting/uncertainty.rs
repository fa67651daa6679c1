//! Parameter uncertainties from the curvature of the log-posterior.

use nalgebra::DMatrix;

use super::{active_indices, weights, DataPoint, Design, Engine, FitResult};
use crate::curves::CurveModel;
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

/// `sigma_j = sqrt((-H)^-1_jj)` for a maximized objective with Hessian `H`.
fn sigmas_from_hessian(h: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = h.nrows();
    let neg = -h;
    let neg = 0.5 * (&neg + neg.transpose());
    if n == 0 {
        return Ok(Vec::new());
    }
    if n == 1 {
        let a = neg[(0, 0)];
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::SingularHessian {
                condition: f64::INFINITY,
            });
        }
        return Ok(vec![1.0 / a.sqrt()]);
    }
    let (s, d) = super::linalg::equilibrate(&neg);
    let eig = s.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let min = eig.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(min > 1e-13 * max.abs()) || !condition.is_finite() {
        return Err(Error::SingularHessian { condition });
    }
    let chol = s.cholesky().ok_or(Error::SingularHessian { condition })?;
    let inv = chol.inverse();
    Ok((0..n).map(|k| inv[(k, k)].sqrt() * d[k]).collect())
}

/// Uncertainties of a maximum of `f` at `x` from a central-difference
/// Hessian with per-coordinate `steps`.
pub fn hessian_sigmas<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], steps: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let f0 = f(x);
    let mut p = x.to_vec();
    for i in 0..n {
        let hi = steps[i];
        p[i] = x[i] + hi;
        let fp = f(&p);
        p[i] = x[i] - hi;
        let fm = f(&p);
        p[i] = x[i];
        h[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in 0..i {
            let hj = steps[j];
            let mut eval = |si: f64, sj: f64| {
                p[i] = x[i] + si * hi;
                p[j] = x[j] + sj * hj;
                let v = f(&p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * hi * hj);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    sigmas_from_hessian(&h)
}

/// `d ln P_i / dR_i` and `d^2 ln P_i / dR_i^2` for one residual.
fn point_derivatives(engine: Engine, r: f64, s: f64) -> (f64, f64) {
    match engine {
        Engine::LeastSquares | Engine::PoissonMle => (-r / (s * s), -1.0 / (s * s)),
        Engine::RobustBayesian => (-weights::weight_g(r, s) * r, weights::xi(r, s) * r * r - weights::weight_g(r, s)),
        Engine::Mixture { phi } => (
            -weights::weight_mixture(r, s, phi) * r,
            weights::mixture_curvature(r, s, phi),
        ),
    }
}

/// Gradient of `S` over the active fit-vector entries.
fn gradient(design: &Design, data: &[DataPoint], m: &CurveModel, engine: Engine, active: &[usize]) -> Vec<f64> {
    let n = m.n_addressable();
    let mut acc = vec![CompensatedSum::new(); active.len()];
    let mut row = vec![0.0; n];
    let r = design.residuals(m);
    for i in 0..design.len() {
        design.gradient(m, i, &mut row);
        let slope = match engine {
            Engine::PoissonMle => {
                let w = data[i].cells.unwrap_or(0) as f64;
                let u = data[i].aberrations.unwrap_or(0) as f64;
                let y = r[i] + design.e[i];
                u / y - w
            }
            _ => point_derivatives(engine, r[i], design.s[i]).0,
        };
        for (k, &j) in active.iter().enumerate() {
            acc[k].add(slope * row[j]);
        }
    }
    acc.iter().map(|a| a.value()).collect()
}

/// `sum_i c_i (dY_i/dtheta_j)(dY_i/dtheta_k)`: the exact Hessian for
/// curves linear in their parameters.
fn curvature_matrix(design: &Design, data: &[DataPoint], m: &CurveModel, engine: Engine, active: &[usize]) -> DMatrix<f64> {
    let k = active.len();
    let mut acc = vec![CompensatedSum::new(); k * k];
    let mut row = vec![0.0; m.n_addressable()];
    let r = design.residuals(m);
    for i in 0..design.len() {
        design.gradient(m, i, &mut row);
        let c = match engine {
            Engine::PoissonMle => {
                let u = data[i].aberrations.unwrap_or(0) as f64;
                let y = r[i] + design.e[i];
                -u / (y * y)
            }
            _ => point_derivatives(engine, r[i], design.s[i]).1,
        };
        for (a, &ja) in active.iter().enumerate() {
            for (b, &jb) in active.iter().enumerate() {
                acc[a * k + b].add(c * row[ja] * row[jb]);
            }
        }
    }
    DMatrix::from_fn(k, k, |a, b| acc[a * k + b].value())
}

/// Gauss-Newton scale `1/sqrt(sum (dY/dtheta_j)^2 / sigma0^2)` per active entry.
fn gn_scales(design: &Design, m: &CurveModel, active: &[usize]) -> Vec<f64> {
    let mut acc = vec![CompensatedSum::new(); active.len()];
    let mut row = vec![0.0; m.n_addressable()];
    for i in 0..design.len() {
        design.gradient(m, i, &mut row);
        for (k, &j) in active.iter().enumerate() {
            acc[k].add((row[j] / design.s[i]).powi(2));
        }
    }
    acc.iter()
        .zip(active)
        .map(|(a, &j)| {
            let v = a.value();
            if v > 0.0 {
                1.0 / v.sqrt()
            } else {
                let x = m.fit_vector()[j].abs();
                if x > 0.0 {
                    1e-3 * x
                } else {
                    1e-6
                }
            }
        })
        .collect()
}

fn expand(result: &FitResult, active: &[usize], sub: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; result.model.n_addressable()];
    for (k, &j) in active.iter().enumerate() {
        out[j] = sub[k];
    }
    out
}

/// Uncertainties from the inverse of `-H`, the Hessian of the log-posterior
/// at the optimum. Curves linear in their parameters use the exact Hessian;
/// others difference the analytic gradient.
pub fn uncertainties_hessian(data: &[DataPoint], result: &FitResult) -> Result<Vec<f64>> {
    if !result.converged {
        return Err(Error::NotConverged);
    }
    let design = Design::new(data, &result.model)?;
    let active = active_indices(result.model.n_addressable(), result.y0_mode);
    let m = &result.model;
    let h = if m.kind().is_linear_in_params() {
        curvature_matrix(&design, data, m, result.engine, &active)
    } else {
        let steps: Vec<f64> = gn_scales(&design, m, &active).iter().map(|s| 1e-4 * s).collect();
        let base = m.fit_vector();
        let k = active.len();
        let mut h = DMatrix::zeros(k, k);
        for (c, &j) in active.iter().enumerate() {
            let mut v = base.clone();
            v[j] = base[j] + steps[c];
            let gp = gradient(&design, data, &m.with_fit_vector_unchecked(&v), result.engine, &active);
            v[j] = base[j] - steps[c];
            let gm = gradient(&design, data, &m.with_fit_vector_unchecked(&v), result.engine, &active);
            for r in 0..k {
                h[(r, c)] = (gp[r] - gm[r]) / (2.0 * steps[c]);
            }
        }
        h
    };
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularHessian {
            condition: f64::INFINITY,
        });
    }
    let sub = sigmas_from_hessian(&h)?;
    Ok(expand(result, &active, &sub))
}

/// Cramér-Rao lower bounds `1/sqrt(omega_j)` with
/// `omega_j = -sum_i (d^2 ln P_i / dR_i^2) (dY_i/dtheta_j)^2`.
pub fn uncertainties_cramer_rao(data: &[DataPoint], result: &FitResult) -> Result<Vec<f64>> {
    if !result.converged {
        return Err(Error::NotConverged);
    }
    let design = Design::new(data, &result.model)?;
    let active = active_indices(result.model.n_addressable(), result.y0_mode);
    let h = curvature_matrix(&design, data, &result.model, result.engine, &active);
    let mut sub = Vec::with_capacity(active.len());
    for (k, &j) in active.iter().enumerate() {
        let omega = -h[(k, k)];
        if !(omega > 0.0) || !omega.is_finite() {
            return Err(Error::InvalidCurvature { param: j, omega });
        }
        sub.push(1.0 / omega.sqrt());
    }
    Ok(expand(result, &active, &sub))
}

#[cfg(test)]
pub(crate) fn log_posterior_at(data: &[DataPoint], result: &FitResult, theta: &[f64]) -> Result<f64> {
    let design = Design::new(data, &result.model)?;
    let m = result.model.with_fit_vector_unchecked(theta);
    Ok(super::log_posterior_design(&design, data, &m, result.engine))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::CurveKind;
    use crate::fitting::{fit_least_squares, fit_robust_bayesian, FitOptions};

    #[test]
    fn gaussian_toy_objective() {
        let s = 0.37;
        let f = |x: &[f64]| -(x[0] - 1.5).powi(2) / (2.0 * s * s);
        let sig = hessian_sigmas(f, &[1.5], &[1e-3]).unwrap();
        assert!((sig[0] - s).abs() < 1e-6);
        let g = |x: &[f64]| -(x[0] - 1.0).powi(2) / 2.0 - (x[1] + 2.0).powi(2) / (2.0 * 9.0);
        let sig = hessian_sigmas(g, &[1.0, -2.0], &[1e-2, 1e-2]).unwrap();
        assert!((sig[0] - 1.0).abs() < 1e-6 && (sig[1] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn flat_direction_is_singular() {
        let f = |x: &[f64]| -(x[0] - 1.0).powi(2);
        assert!(matches!(
            hessian_sigmas(f, &[1.0, 0.0], &[1e-3, 1e-3]),
            Err(Error::SingularHessian { .. })
        ));
    }

    fn scattered(seed: u64) -> Vec<DataPoint> {
        use rand::Rng;
        let mut rng = crate::numeric::stream(seed, 9);
        (0..12)
            .map(|i| {
                let d = 0.4 * i as f64;
                let e = 0.001 + 0.02 * d + 0.06 * d * d + 0.02 * (rng.random::<f64>() - 0.5);
                DataPoint::new(d, 0.0, e.max(0.0), 0.01)
            })
            .collect()
    }

    #[test]
    fn least_squares_hessian_is_covariance() {
        let lq = CurveModel::template(CurveKind::LinearQuadraticGamma).unwrap();
        let data = scattered(1);
        let fit = fit_least_squares(&data, &lq, &FitOptions::default()).unwrap();
        let h = uncertainties_hessian(&data, &fit).unwrap();
        for (a, b) in h.iter().zip(&fit.sigmas) {
            assert!((a - b).abs() < 1e-9 * b);
        }
    }

    #[test]
    fn cramer_rao_bounds_hessian() {
        let lq = CurveModel::template(CurveKind::LinearQuadraticGamma).unwrap();
        for seed in 0..6 {
            let data = scattered(seed);
            let fit = fit_robust_bayesian(&data, &lq, &FitOptions::default()).unwrap();
            let h = uncertainties_hessian(&data, &fit).unwrap();
            let cr = uncertainties_cramer_rao(&data, &fit).unwrap();
            for (c, h) in cr.iter().zip(&h) {
                assert!(c <= h, "{c} > {h}");
            }
        }
    }

    #[test]
    fn nonlinear_hessian_matches_value_differences() {
        let kind = CurveKind::SaturatedSigmoid;
        let data = scattered(2);
        let fit = fit_robust_bayesian(&data, &CurveModel::template(kind).unwrap(), &FitOptions::default()).unwrap();
        let h = uncertainties_hessian(&data, &fit).unwrap();
        let base = fit.model.fit_vector();
        let steps: Vec<f64> = h.iter().map(|s| 1e-4 * s).collect();
        let v = hessian_sigmas(|x| log_posterior_at(&data, &fit, x).unwrap(), &base, &steps).unwrap();
        for (a, b) in h.iter().zip(&v) {
            assert!((a / b - 1.0).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn unconverged_fit_is_rejected() {
        let lq = CurveModel::template(CurveKind::LinearQuadraticGamma).unwrap();
        let data = scattered(0);
        let mut fit = fit_robust_bayesian(&data, &lq, &FitOptions::default()).unwrap();
        fit.converged = false;
        assert!(matches!(uncertainties_hessian(&data, &fit), Err(Error::NotConverged)));
        assert!(matches!(uncertainties_cramer_rao(&data, &fit), Err(Error::NotConverged)));
    }

    #[test]
    fn uninformative_parameter_is_singular() {
        // every point at zero dose: the slope is invisible to the data
        let data: Vec<_> = (0..5).map(|i| DataPoint::new(0.0, 0.0, 0.001 * i as f64, 0.01)).collect();
        let m = CurveModel::new(CurveKind::LinearNeutron, vec![0.1]).unwrap();
        let fit = FitResult {
            model: m.clone(),
            sigmas: vec![0.0; 2],
            sigma_source: crate::fitting::SigmaSource::Unavailable,
            log_posterior: 0.0,
            weights: vec![1.0; 5],
            engine: Engine::RobustBayesian,
            iterations: 1,
            converged: true,
            y0_mode: crate::fitting::Y0Mode::Free,
            chi2: 0.0,
        };
        assert!(matches!(uncertainties_hessian(&data, &fit), Err(Error::SingularHessian { .. })));
    }
}
