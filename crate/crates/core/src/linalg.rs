//! Small dense helpers shared by the compute modules.
//!
//! Reductions use a fixed pairwise tree so a sum's value depends only on the
//! operands, never on how work was split across threads.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const PAIRWISE_BLOCK: usize = 32;

pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= PAIRWISE_BLOCK {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    } else {
        let mid = a.len() / 2;
        dot(&a[..mid], &b[..mid]) + dot(&a[mid..], &b[mid..])
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= PAIRWISE_BLOCK {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    } else {
        let mid = a.len() / 2;
        sq_dist(&a[..mid], &b[..mid]) + sq_dist(&a[mid..], &b[mid..])
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Largest `|a_ij - a_ji|`, with its location.
pub fn max_asymmetry(a: &DMatrix<f64>) -> (f64, usize, usize) {
    let mut worst = (0.0, 0, 0);
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            let gap = (a[(i, j)] - a[(j, i)]).abs();
            if gap > worst.0 {
                worst = (gap, i, j);
            }
        }
    }
    worst
}

/// Symmetry check at `tol` relative to `max(1, max|a|)`.
pub fn check_symmetric(a: &DMatrix<f64>, tol: f64) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::dims("square matrix", a.nrows(), a.ncols()));
    }
    let scale = a.amax().max(1.0);
    let (gap, row, col) = max_asymmetry(a);
    if gap > tol * scale {
        return Err(Error::Asymmetric { row, col, gap });
    }
    Ok(())
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

pub fn cholesky(a: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(a).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// Reciprocal condition estimate from the Cholesky diagonal; cheap and good to
/// within the square of the true condition number's order of magnitude.
pub fn cholesky_condition_estimate(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..l.nrows() {
        let d = l[(i, i)].abs();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        (hi / lo).powi(2)
    }
}

pub fn vec_from(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}
