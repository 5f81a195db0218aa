//! Small dense helpers: Cholesky solves and ridge-stabilized least squares.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Solves `a x = b` for symmetric positive definite `a` (row-major, p×p).
pub fn cholesky_solve(a: &Array2<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let p = a.nrows();
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::Undefined("matrix is not positive definite".into()));
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    let mut z = b.to_vec();
    for i in 0..p {
        let mut s = z[i];
        for k in 0..i {
            s -= l[i * p + k] * z[k];
        }
        z[i] = s / l[i * p + i];
    }
    for i in (0..p).rev() {
        let mut s = z[i];
        for k in i + 1..p {
            s -= l[k * p + i] * z[k];
        }
        z[i] = s / l[i * p + i];
    }
    Ok(z)
}

/// Least squares with an unpenalized intercept and ridge `ridge * I` on the
/// centered Gram matrix scaled by `1/n`. Returns `(intercept, coefficients)`.
///
/// The ridge is relative: `ridge * max(1e-300, mean diagonal)` is added so
/// rank-deficient designs (e.g. all-zero columns) still solve.
pub fn ridge_ols(x: ArrayView2<f64>, y: &[f64], ridge: f64) -> Result<(f64, Array1<f64>)> {
    let (n, p) = x.dim();
    if n != y.len() {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidInput("no rows".into()));
    }
    let nf = n as f64;
    let ymean = y.iter().sum::<f64>() / nf;
    let xmean: Array1<f64> = x.sum_axis(ndarray::Axis(0)) / nf;
    if p == 0 {
        return Ok((ymean, Array1::zeros(0)));
    }
    let mut xc = x.to_owned();
    for mut row in xc.rows_mut() {
        row -= &xmean;
    }
    let mut gram = xc.t().dot(&xc) / nf;
    let yc: Array1<f64> = y.iter().map(|v| v - ymean).collect();
    let rhs = xc.t().dot(&yc) / nf;
    let mean_diag = (0..p).map(|j| gram[[j, j]]).sum::<f64>() / p as f64;
    let delta = ridge * mean_diag.max(1e-300) + 1e-300;
    for j in 0..p {
        gram[[j, j]] += delta;
    }
    let beta = Array1::from(cholesky_solve(&gram, rhs.as_slice().unwrap())?);
    let intercept = ymean - xmean.dot(&beta);
    Ok((intercept, beta))
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population variance (divides by `n`).
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (divides by `n - 1`); 0 for fewer than 2 values.
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_solves_spd() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let x = cholesky_solve(&a, &[2.0, 1.0]).unwrap();
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-12);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-12);
        assert!(cholesky_solve(&array![[0.0]], &[1.0]).is_err());
    }

    #[test]
    fn ridge_ols_recovers_exact_fit() {
        let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0]];
        let y: Vec<f64> = x.rows().into_iter().map(|r| 1.5 + 2.0 * r[0] - r[1]).collect();
        let (b0, b) = ridge_ols(x.view(), &y, 1e-12).unwrap();
        assert!((b0 - 1.5).abs() < 1e-8);
        assert!((b[0] - 2.0).abs() < 1e-8 && (b[1] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn ridge_ols_handles_zero_column() {
        let x = array![[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        let (_, b) = ridge_ols(x.view(), &[1.0, 2.0, 3.0], 1e-8).unwrap();
        assert_eq!(b[1], 0.0);
        assert!((b[0] - 1.0).abs() < 1e-6);
    }
}
