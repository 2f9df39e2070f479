//! Row-similarity measures of row-stochastic matrices.
//!
//! `delta(X) = max_j max_{i1,i2} |X[i1,j] - X[i2,j]|`
//! `lambda(X) = 1 - min_{i1,i2} sum_j min(X[i1,j], X[i2,j])`
//!
//! The consensus argument for trimmed-mean updates rests on
//! `delta(X(1) ... X(m)) <= prod lambda(X(i))` and `||X - 1 xbar|| <= n delta(X)`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Tolerance on row sums.
pub const ROW_SUM_TOL: f64 = 1e-10;

pub fn check_row_stochastic(x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != x.ncols() {
        return Err(Error::Dimension { expected: x.nrows(), actual: x.ncols() });
    }
    for (row, r) in x.row_iter().enumerate() {
        let sum: f64 = r.iter().sum();
        if r.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::NotStochastic { row, sum });
        }
    }
    Ok(())
}

pub fn delta_metric(x: &DMatrix<f64>) -> Result<f64> {
    check_row_stochastic(x)?;
    Ok(delta_unchecked(x))
}

fn delta_unchecked(x: &DMatrix<f64>) -> f64 {
    x.column_iter()
        .map(|c| c.max() - c.min())
        .fold(0.0, f64::max)
}

pub fn lambda_metric(x: &DMatrix<f64>) -> Result<f64> {
    check_row_stochastic(x)?;
    let n = x.nrows();
    let mut overlap = f64::INFINITY;
    for i1 in 0..n {
        for i2 in i1 + 1..n {
            let s: f64 = (0..n).map(|j| x[(i1, j)].min(x[(i2, j)])).sum();
            overlap = overlap.min(s);
        }
    }
    if n < 2 {
        return Ok(0.0);
    }
    Ok((1.0 - overlap).clamp(0.0, 1.0))
}

/// `||X - 1 xbar||_F` with `xbar` the row vector of column means.
pub fn deviation_norm(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows() as f64;
    x.column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            c.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

/// Both sides of the contraction bound on products for one sequence of matrices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProductBoundReport {
    pub delta_product: f64,
    pub lambda_product: f64,
    /// `lambda_product - delta_product`; negative means a violation.
    pub slack: f64,
    pub pass: bool,
}

/// Checks `delta(X(1) ... X(m)) <= prod lambda(X(i))` within `tol`.
pub fn verify_product_bound(matrices: &[DMatrix<f64>], tol: f64) -> Result<ProductBoundReport> {
    let Some(first) = matrices.first() else {
        return Err(Error::Config("product bound needs at least one matrix".into()));
    };
    let n = first.nrows();
    let mut product = DMatrix::identity(n, n);
    let mut lambda_product = 1.0;
    for x in matrices {
        if x.nrows() != n {
            return Err(Error::Dimension { expected: n, actual: x.nrows() });
        }
        lambda_product *= lambda_metric(x)?;
        product = product * x;
    }
    let delta_product = delta_unchecked(&product);
    let slack = lambda_product - delta_product;
    Ok(ProductBoundReport { delta_product, lambda_product, slack, pass: slack >= -tol })
}

/// Random `n x n` row-stochastic matrix. Each entry is zeroed with
/// probability `sparsity` (keeping at least one positive entry per row) so
/// that disjoint-support rows and `lambda = 1` cases are exercised.
pub fn random_row_stochastic<R: Rng + ?Sized>(n: usize, sparsity: f64, rng: &mut R) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, n);
    for i in 0..n {
        let keep = rng.random_range(0..n);
        for j in 0..n {
            if j == keep || rng.random::<f64>() >= sparsity {
                x[(i, j)] = rng.random::<f64>() + 1e-12;
            }
        }
        let sum: f64 = x.row(i).sum();
        for j in 0..n {
            x[(i, j)] /= sum;
        }
    }
    x
}
