use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Cholesky factor of `gram + λ·diag(penalty)`, retried once with a ridge of
/// `1e-10·trace/q` when the matrix is numerically singular.
pub(crate) fn penalized_cholesky(
    gram: &DMatrix<f64>,
    penalty: &DVector<f64>,
    lambda: f64,
) -> Result<Cholesky<f64, Dyn>> {
    let q = gram.nrows();
    let mut a = gram.clone();
    for j in 0..q {
        a[(j, j)] += lambda * penalty[j];
    }
    if let Some(ch) = Cholesky::new(a.clone()) {
        return Ok(ch);
    }
    let ridge = 1e-10 * a.trace().abs().max(f64::MIN_POSITIVE) / q as f64;
    for j in 0..q {
        a[(j, j)] += ridge;
    }
    Cholesky::new(a).ok_or_else(|| {
        Error::NumericalFailure(format!(
            "penalized normal equations singular at lambda = {lambda:e}"
        ))
    })
}

/// Rows of `m` selected by index.
pub(crate) fn rows_of(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

pub(crate) fn entries_of(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_fn(rows.len(), |r, _| v[rows[r]])
}
