//! Dense linear-algebra helpers shared by the estimation modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff for rank decisions and generalized
/// inverses.
pub const RANK_RTOL: f64 = 1e-10;

/// Numerical rank of `m` (singular values above `RANK_RTOL * sigma_max`).
pub fn rank(m: &DMatrix<f64>) -> usize {
    let sv = m.singular_values();
    let smax = sv.max();
    if smax <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_RTOL * smax).count()
}

/// Checks that `m` has full column rank; `context` labels the error.
pub fn require_full_column_rank(m: &DMatrix<f64>, context: &str) -> Result<()> {
    let sv = m.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if smax <= 0.0 || smin <= RANK_RTOL * smax {
        return Err(Error::RankDeficient {
            context: context.to_string(),
            ratio: if smax > 0.0 { smin / smax } else { 0.0 },
        });
    }
    Ok(())
}

/// Moore-Penrose inverse of a symmetric positive semidefinite matrix,
/// thresholding singular values at `RANK_RTOL * sigma_max`.
pub fn pinv_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let mut pinv = DMatrix::zeros(n, n);
    for k in 0..svd.singular_values.len() {
        let s = svd.singular_values[k];
        if smax > 0.0 && s > RANK_RTOL * smax {
            let uk = u.column(k);
            let vk = vt.row(k);
            for i in 0..n {
                for j in 0..n {
                    pinv[(i, j)] += vk[i] * uk[j] / s;
                }
            }
        }
    }
    pinv
}

/// Ordinary least squares of `y` on the columns of `x`.
///
/// Solved through the SVD so near-rank-deficiency is detected rather than
/// amplified. Errors with `RankDeficient` when `x` loses column rank.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    require_full_column_rank(x, context)?;
    let svd = x.clone().svd(true, true);
    let coef = svd
        .solve(y, RANK_RTOL * svd.singular_values.max())
        .map_err(|_| Error::SingularMoment {
            context: context.to_string(),
        })?;
    Ok(DVector::from_column_slice(coef.as_slice()))
}

/// Weighted norm `(u' A u)^{1/2}` for a compatible vector and matrix.
pub fn weighted_norm(u: &DVector<f64>, a: &DMatrix<f64>) -> f64 {
    (u.dot(&(a * u))).max(0.0).sqrt()
}

/// Sample standard deviation with denominator `n - 1`.
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (ss / (n - 1) as f64).sqrt()
}

/// Pearson correlation of two equally long samples.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}
