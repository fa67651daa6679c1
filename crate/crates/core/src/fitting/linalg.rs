//! Dense linear solves for the normal equations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// 4x4 determinant by Laplace expansion along the first row.
pub fn det4(m: &[[f64; 4]; 4]) -> f64 {
    let mut total = 0.0;
    for col in 0..4 {
        let mut minor = [[0.0; 3]; 3];
        for (r, row) in m.iter().enumerate().skip(1) {
            let mut c2 = 0;
            for (c, &v) in row.iter().enumerate() {
                if c != col {
                    minor[r - 1][c2] = v;
                    c2 += 1;
                }
            }
        }
        let sign = if col % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * m[0][col] * det3(&minor);
    }
    total
}

/// Cramer's rule for a 4x4 system: `x_k = W_k / W_0`, where `W_k` is the
/// determinant with column `k` replaced by `b`.
pub fn solve_cramer4(a: &[[f64; 4]; 4], b: &[f64; 4]) -> Result<[f64; 4]> {
    let w0 = det4(a);
    let scale: f64 = a
        .iter()
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .product();
    if !(w0.abs() > 1e-13 * scale) {
        return Err(Error::DegenerateDesign(w0));
    }
    let mut x = [0.0; 4];
    for (k, xk) in x.iter_mut().enumerate() {
        let mut m = *a;
        for r in 0..4 {
            m[r][k] = b[r];
        }
        *xk = det4(&m) / w0;
    }
    Ok(x)
}

/// Solves a symmetric positive semi-definite system, reporting rank
/// deficiency from the eigenvalue spread.
pub fn solve_symmetric(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    check_rank(a)?;
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::RankDeficient("normal matrix is singular".into()))
}

/// Errors when the relative spread of eigenvalues of symmetric `a` shows it
/// is numerically singular.
pub fn check_rank(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() == 0 {
        return Ok(());
    }
    let eig = a.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if !(max > 0.0) || !(min > 1e-14 * max) {
        return Err(Error::RankDeficient(format!(
            "normal matrix eigenvalues span [{min:e}, {max:e}]"
        )));
    }
    Ok(())
}

/// Equilibrated copy `D A D` with `D = diag(1/sqrt|A_ii|)`; returns the
/// scale vector too.
pub fn equilibrate(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = a.nrows();
    let d = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let v = a[(i, i)].abs();
            if v > 0.0 {
                1.0 / v.sqrt()
            } else {
                1.0
            }
        }),
    );
    let mut s = a.clone();
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] *= d[i] * d[j];
        }
    }
    (s, d)
}
