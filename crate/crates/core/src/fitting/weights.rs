//! Per-point likelihood factors and weights.
//!
//! Everything is written in terms of `t = R^2 / (2 sigma0^2)` and the kernel
//! `h(t) = (1 - e^-t) / t`, whose derivatives have closed forms that lose
//! precision for small `t`; below a switch point those are replaced by their
//! Taylor series.

use std::f64::consts::PI;

/// Below this `t` the closed forms are replaced by series; the two branches
/// agree to better than 1e-13 relative at the switch.
const SERIES_T: f64 = 0.05;

fn t_of(r: f64, sigma0: f64) -> f64 {
    let z = r / sigma0;
    0.5 * z * z
}

/// `h(t) = (1 - e^-t)/t`, with `h(0) = 1`.
pub fn kernel_h(t: f64) -> f64 {
    if t == 0.0 {
        1.0
    } else {
        -(-t).exp_m1() / t
    }
}

/// Sums `sum_{n>=n0} coef(n) t^(n-n0)` until terms stop contributing.
fn series(t: f64, n0: u32, coef: impl Fn(u32) -> f64) -> f64 {
    let mut total = 0.0;
    let mut tp = 1.0;
    let mut fact: f64 = (1..=n0).map(f64::from).product();
    let mut n = n0;
    loop {
        let term = coef(n) / fact * tp;
        total += term;
        if term.abs() <= 1e-18 * total.abs() || n > n0 + 40 {
            return total;
        }
        n += 1;
        fact *= f64::from(n);
        tp *= t;
    }
}

/// `h'(t) = [e^-t (1 + t) - 1] / t^2`.
pub fn kernel_h1(t: f64) -> f64 {
    if t < SERIES_T * 10.0 {
        // coefficient of t^n in e^-t (1 + t) is (-1)^n (1 - n)/n!
        series(t, 2, |n| if n % 2 == 0 { 1.0 - f64::from(n) } else { f64::from(n) - 1.0 })
    } else {
        ((-t).exp() * (1.0 + t) - 1.0) / (t * t)
    }
}

/// `h''(t) = [2 - e^-t (2 + 2t + t^2)] / t^3`.
pub fn kernel_h2(t: f64) -> f64 {
    if t < SERIES_T * 10.0 {
        series(t, 3, |n| {
            let c = f64::from((n - 1) * (n - 2));
            if n % 2 == 0 {
                -c
            } else {
                c
            }
        })
    } else {
        (2.0 - (-t).exp() * (2.0 + 2.0 * t + t * t)) / (t * t * t)
    }
}

/// Robust weight `g(R) = (1/R^2) [2 - (R^2/sigma0^2) / (exp(R^2/(2 sigma0^2)) - 1)]`.
///
/// Equals `-(d ln P / dR) / R`; tends to `1/(2 sigma0^2)` as `R -> 0` and to
/// `2/R^2` for large `|R|`.
pub fn weight_g(r: f64, sigma0: f64) -> f64 {
    let s2 = sigma0 * sigma0;
    let t = t_of(r, sigma0);
    if t < SERIES_T {
        let t2 = t * t;
        (1.0 - t / 6.0 + t * t2 / 360.0 - t * t2 * t2 / 15120.0) / (2.0 * s2)
    } else {
        (2.0 - 2.0 * t / t.exp_m1()) / (r * r)
    }
}

/// Marginal density of one point under the `1/sigma` error-scale prior:
/// `P(R) = sigma0 / (R^2 sqrt(2 pi)) (1 - e^-t)`, with `P(0) = 1/(2 sigma0 sqrt(2 pi))`.
pub fn density_p(r: f64, sigma0: f64) -> f64 {
    kernel_h(t_of(r, sigma0)) / (2.0 * sigma0 * (2.0 * PI).sqrt())
}

/// `ln P(R)`.
pub fn log_density_p(r: f64, sigma0: f64) -> f64 {
    kernel_h(t_of(r, sigma0)).ln() - (2.0 * sigma0 * (2.0 * PI).sqrt()).ln()
}

/// Curvature helper `xi(R) = -g'(R)/R`, so that
/// `d^2 ln P / dR^2 = xi R^2 - g`.
pub fn xi(r: f64, sigma0: f64) -> f64 {
    let t = t_of(r, sigma0);
    let h = kernel_h(t);
    let h1 = kernel_h1(t);
    let h2 = kernel_h2(t);
    let s4 = sigma0.powi(4);
    (h2 * h - h1 * h1) / (h * h * s4)
}

/// `A(t) = phi h(t)/2 + (1 - phi) e^-t`, the bracket of the mixture density.
fn mixture_a(t: f64, phi: f64) -> (f64, f64) {
    let e = (-t).exp();
    let a = 0.5 * phi * kernel_h(t) + (1.0 - phi) * e;
    let a1 = 0.5 * phi * kernel_h1(t) - (1.0 - phi) * e;
    (a, a1)
}

/// Mixture weight `g*`: a point is an outlier with probability `phi`.
/// Reduces to `1/sigma0^2` at `phi = 0` and to [`weight_g`] at `phi = 1`.
pub fn weight_mixture(r: f64, sigma0: f64, phi: f64) -> f64 {
    let s2 = sigma0 * sigma0;
    if phi == 0.0 {
        return 1.0 / s2;
    }
    if phi == 1.0 {
        return weight_g(r, sigma0);
    }
    let t = t_of(r, sigma0);
    if t > 700.0 {
        return weight_g(r, sigma0);
    }
    let (a, a1) = mixture_a(t, phi);
    -a1 / (s2 * a)
}

/// `ln` of the mixture density of one point.
pub fn log_density_mixture(r: f64, sigma0: f64, phi: f64) -> f64 {
    let t = t_of(r, sigma0);
    let norm = -(sigma0 * (2.0 * PI).sqrt()).ln();
    let good = if phi < 1.0 { Some((1.0 - phi).ln() - t) } else { None };
    let bad = if phi > 0.0 { Some((0.5 * phi).ln() + kernel_h(t).ln()) } else { None };
    let mix = match (good, bad) {
        (Some(x), Some(y)) => {
            let m = x.max(y);
            m + ((x - m).exp() + (y - m).exp()).ln()
        }
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => f64::NEG_INFINITY,
    };
    norm + mix
}

/// Curvature `d^2 ln P* / dR^2` of the mixture density.
pub fn mixture_curvature(r: f64, sigma0: f64, phi: f64) -> f64 {
    let s2 = sigma0 * sigma0;
    if phi == 0.0 {
        return -1.0 / s2;
    }
    let t = t_of(r, sigma0);
    if phi == 1.0 || t > 700.0 {
        return xi(r, sigma0) * r * r - weight_g(r, sigma0);
    }
    let e = (-t).exp();
    let (a, a1) = mixture_a(t, phi);
    let a2 = 0.5 * phi * kernel_h2(t) + (1.0 - phi) * e;
    // ln P* = ln A(t) + c; dt/dR = R/s2
    let dln_a = a1 / a;
    let d2ln_a = a2 / a - dln_a * dln_a;
    d2ln_a * (r * r) / (s2 * s2) + dln_a / s2
}
