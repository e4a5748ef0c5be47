//! Small dense linear algebra kernels: Cholesky factorization with a jitter
//! fallback, triangular solves, and inverses from the factor.
//!
//! Matrices are row-major `Vec<f64>` slices; everything here is written for
//! symmetric positive definite kernel matrices of at most a few thousand rows.

use crate::error::{Error, Result};
use crate::tensor::gemm_at_b;

/// In-place lower Cholesky of a symmetric matrix. On success the lower
/// triangle (incl. diagonal) of `a` holds `L` with `a = L L^T`; the upper
/// triangle is left untouched. Returns the failing pivot index on failure.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> std::result::Result<(), usize> {
    assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            let v = a[j * n + k];
            d -= v * v;
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(j);
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let (upper, lower) = a.split_at_mut(i * n);
            let row_j = &upper[j * n..j * n + j];
            let row_i = &mut lower[..n];
            let mut s = row_i[j];
            for (xik, ljk) in row_i[..j].iter().zip(row_j.iter()) {
                s -= xik * ljk;
            }
            row_i[j] = s / d;
        }
    }
    Ok(())
}

/// Mean of the diagonal, used to scale jitter.
pub fn diag_mean(a: &[f64], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (0..n).map(|i| a[i * n + i]).sum::<f64>() / n as f64
}

/// Cholesky with escalating diagonal jitter.
///
/// Tries the factorization as-is, then with `1e-6 * mean(diag)` added to the
/// diagonal, escalating tenfold up to `1e-2 * mean(diag)` before giving up.
/// Returns the factor and the jitter that was actually applied.
pub fn cholesky_with_jitter(k: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
    assert_eq!(k.len(), n * n);
    let scale = diag_mean(k, n).abs().max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    let mut rel = 0.0;
    loop {
        let mut a = k.to_vec();
        if jitter > 0.0 {
            for i in 0..n {
                a[i * n + i] += jitter;
            }
        }
        match cholesky_in_place(&mut a, n) {
            Ok(()) => {
                // zero the (untouched) upper triangle so L is a clean factor
                for i in 0..n {
                    for j in (i + 1)..n {
                        a[i * n + j] = 0.0;
                    }
                }
                return Ok((a, jitter));
            }
            Err(_) => {
                rel = if rel == 0.0 { 1e-6 } else { rel * 10.0 };
                if rel > 1e-2 {
                    return Err(Error::Factorization {
                        size: n,
                        last_jitter: jitter,
                    });
                }
                jitter = rel * scale;
            }
        }
    }
}

/// Solves `L x = b` in place (forward substitution), `L` lower triangular.
pub fn solve_lower(l: &[f64], n: usize, b: &mut [f64]) {
    assert_eq!(l.len(), n * n);
    assert_eq!(b.len(), n);
    for i in 0..n {
        let (done, rest) = b.split_at_mut(i);
        let mut s = rest[0];
        let row = &l[i * n..i * n + i];
        for (lik, xk) in row.iter().zip(done.iter()) {
            s -= lik * xk;
        }
        rest[0] = s / l[i * n + i];
    }
}

/// Solves `L^T x = b` in place (back substitution).
pub fn solve_lower_t(l: &[f64], n: usize, b: &mut [f64]) {
    assert_eq!(l.len(), n * n);
    assert_eq!(b.len(), n);
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `(L L^T) x = b` in place.
pub fn chol_solve(l: &[f64], n: usize, b: &mut [f64]) {
    solve_lower(l, n, b);
    solve_lower_t(l, n, b);
}

/// Inverse of a lower-triangular matrix (row-major, result lower-triangular).
pub fn lower_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    // column by column: L x = e_j
    for j in 0..n {
        inv[j * n + j] = 1.0 / l[j * n + j];
        for i in (j + 1)..n {
            let mut s = 0.0;
            for k in j..i {
                s -= l[i * n + k] * inv[k * n + j];
            }
            inv[i * n + j] = s / l[i * n + i];
        }
    }
    inv
}

/// Full inverse `(L L^T)^{-1} = L^{-T} L^{-1}` from a Cholesky factor.
pub fn chol_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let linv = lower_inverse(l, n);
    let mut out = vec![0.0; n * n];
    gemm_at_b(n, n, n, &linv, &linv, 0.0, &mut out);
    out
}

/// `log det(L L^T) = 2 * sum(log diag(L))`.
pub fn logdet_from_chol(l: &[f64], n: usize) -> f64 {
    2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>()
}
