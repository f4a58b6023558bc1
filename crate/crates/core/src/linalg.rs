//! Small dense linear-algebra helpers over row-major buffers, backed by nalgebra.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Relative pivot threshold below which a triangular factor is treated as singular.
const RANK_TOL: f64 = 1e-12;

pub(crate) fn to_matrix(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

pub(crate) fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        out.extend(m.row(r).iter());
    }
    out
}

pub(crate) fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// `rows×cols` (rows ≥ cols) matrix with orthonormal columns: the sign-fixed Q
/// factor of a Gaussian draw, which is Haar distributed.
pub(crate) fn orthonormal_columns(rows: usize, cols: usize, rng: &mut Rng) -> Vec<f64> {
    debug_assert!(rows >= cols);
    let g = to_matrix(rows, cols, &gaussian(rows, cols, 1.0, rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    to_row_major(&q)
}

/// Least-squares solution of `a·x ≈ b` for a row-major `rows×cols` matrix.
///
/// Full column rank goes through Householder QR. Otherwise the minimum-norm
/// solution from the SVD is returned with `rank_deficient = true`.
pub(crate) fn least_squares(rows: usize, cols: usize, a: &[f64], b: &[f64]) -> (Vec<f64>, bool) {
    let am = to_matrix(rows, cols, a);
    let bv = DVector::from_column_slice(b);
    if rows >= cols {
        let qr = am.clone().qr();
        let r = qr.r();
        let scale = (0..cols).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
        let full_rank = scale > 0.0 && (0..cols).all(|j| r[(j, j)].abs() > RANK_TOL * scale);
        if full_rank {
            let qtb = qr.q().transpose() * &bv;
            if let Some(x) = r.solve_upper_triangular(&qtb) {
                return (x.iter().copied().collect(), false);
            }
        }
    }
    let svd = am.svd(true, true);
    let max_sv = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let x = svd
        .solve(&bv, RANK_TOL * max_sv.max(f64::MIN_POSITIVE))
        .expect("u and v were computed");
    (x.iter().copied().collect(), true)
}

/// Solves `g·x = b` for symmetric positive definite `g` (row-major `n×n`),
/// for every column of the row-major `n×k` right-hand side.
pub(crate) fn spd_solve(n: usize, g: &[f64], k: usize, b: &[f64]) -> Result<Vec<f64>> {
    let gm = to_matrix(n, n, g);
    let trace: f64 = (0..n).map(|i| gm[(i, i)]).sum();
    let chol = gm
        .cholesky()
        .ok_or_else(|| Error::Singular("Gram matrix is not positive definite".into()))?;
    let l = chol.l();
    let min_pivot = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(min_pivot > RANK_TOL * trace.max(f64::MIN_POSITIVE)) {
        return Err(Error::Singular(format!(
            "Gram matrix is numerically singular (smallest pivot {min_pivot:.3e}, trace {trace:.3e})"
        )));
    }
    let x = chol.solve(&to_matrix(n, k, b));
    Ok(to_row_major(&x))
}

/// Eigenvalues of a symmetric row-major `n×n` matrix.
pub(crate) fn symmetric_eigenvalues(n: usize, s: &[f64]) -> Vec<f64> {
    to_matrix(n, n, s).symmetric_eigenvalues().iter().copied().collect()
}

/// Squared largest singular value of the linear map `apply` (with adjoint
/// `adjoint`, input length `n`), by power iteration on `AᵀA`.
pub fn spectral_norm_sq(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    adjoint: impl Fn(&[f64]) -> Vec<f64>,
    n: usize,
    tol: f64,
    max_iter: usize,
    rng: &mut Rng,
) -> f64 {
    let normalize = |v: &mut Vec<f64>| {
        let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm > 0.0 {
            v.iter_mut().for_each(|x| *x /= nrm);
        }
        nrm
    };
    let mut v = gaussian(1, n, 1.0, rng);
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let mut w = adjoint(&apply(&v));
        let next = normalize(&mut w);
        if next == 0.0 {
            // v fell into the null space; restart from a fresh direction
            v = gaussian(1, n, 1.0, rng);
            normalize(&mut v);
            continue;
        }
        v = w;
        let converged = (next - lambda).abs() <= tol * next;
        lambda = next;
        if converged {
            break;
        }
    }
    lambda
}
