//! Symmetric eigenproblems: dense decompositions and a leading-eigenpair
//! subspace iteration.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par, Side};

use crate::error::{Error, Result};

/// Eigenpairs sorted by descending eigenvalue.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    /// One eigenvector per column, matching `values`.
    pub vectors: Mat<f64>,
}

/// Full decomposition of a symmetric matrix (lower triangle is read).
pub fn sym_eigen(a: MatRef<'_, f64>) -> Result<EigenPairs> {
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Numerical(format!("symmetric eigendecomposition failed: {e:?}")))?;
    let n = a.nrows();
    let s = evd.S();
    let u = evd.U();
    let values = (0..n).rev().map(|i| s[i]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| u[(r, n - 1 - c)]);
    Ok(EigenPairs { values, vectors })
}

/// `a * b` with a fresh output.
pub fn mat_mul(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::zeros(a.nrows(), b.ncols());
    matmul(&mut out, Accum::Replace, a, b, 1.0, Par::Seq);
    out
}

/// `aᵀ * b` with a fresh output.
pub fn mat_tmul(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::zeros(a.ncols(), b.ncols());
    matmul(&mut out, Accum::Replace, a.transpose(), b, 1.0, Par::Seq);
    out
}

/// Settings for [`leading_eigenpairs`].
#[derive(Debug, Clone, Copy)]
pub struct SubspaceOptions {
    /// Number of iterated vectors; at least the number requested.
    pub block: usize,
    /// Added to the diagonal so the wanted eigenvalues dominate in magnitude.
    pub shift: f64,
    /// Converged once every requested pair has `‖A v − λ v‖ ≤ tol`.
    pub tol: f64,
    pub max_iter: usize,
}

/// The `count` algebraically largest eigenpairs of symmetric `a` by block
/// subspace iteration with Rayleigh–Ritz extraction.
///
/// `values` holds all `block` Ritz values; entries past `count` are
/// unconverged estimates of the following eigenvalues.
///
/// The start block is the first `block` columns of the identity, so the
/// result is deterministic. Returns `None` without convergence.
pub fn leading_eigenpairs(a: MatRef<'_, f64>, count: usize, opts: SubspaceOptions) -> Option<EigenPairs> {
    let n = a.nrows();
    let block = opts.block.max(count).min(n);
    if count == 0 || count > n {
        return None;
    }
    let mut v = Mat::from_fn(n, block, |r, c| if r == c { 1.0 } else { 0.0 });
    for _ in 0..opts.max_iter {
        let mut w = mat_mul(a, v.as_ref());
        for c in 0..block {
            for r in 0..n {
                w[(r, c)] += opts.shift * v[(r, c)];
            }
        }
        let q = w.qr().compute_thin_Q();
        let aq = mat_mul(a, q.as_ref());
        let h = mat_tmul(q.as_ref(), aq.as_ref());
        let ritz = sym_eigen(h.as_ref()).ok()?;
        v = mat_mul(q.as_ref(), ritz.vectors.as_ref());
        let av = mat_mul(aq.as_ref(), ritz.vectors.as_ref());
        let converged = (0..count).all(|c| {
            let lam = ritz.values[c];
            let res: f64 = (0..n).map(|r| (av[(r, c)] - lam * v[(r, c)]).powi(2)).sum::<f64>().sqrt();
            res <= opts.tol
        });
        if converged {
            let values = ritz.values;
            let vectors = Mat::from_fn(n, count, |r, c| v[(r, c)]);
            return Some(EigenPairs { values, vectors });
        }
    }
    None
}
