//! Independent dense-formula oracles for GP inference.
//!
//! Everything here deliberately avoids the production code path: the kernel
//! matrix is rebuilt with local loops, the inverse comes from Gauss-Jordan
//! elimination with partial pivoting, and the log-determinant from an LU
//! factorization. The production path (Cholesky solves) is checked against
//! these on random problems.

use crate::gp::{MeanFunction, RbfHyperparams};

/// Gauss-Jordan inverse with partial pivoting. `None` when singular.
pub fn gauss_jordan_inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    let mut aug = vec![0.0; n * 2 * n];
    for i in 0..n {
        for j in 0..n {
            aug[i * 2 * n + j] = a[i * n + j];
        }
        aug[i * 2 * n + n + i] = 1.0;
    }
    let w = 2 * n;
    for col in 0..n {
        // pivot
        let mut best = col;
        for r in (col + 1)..n {
            if aug[r * w + col].abs() > aug[best * w + col].abs() {
                best = r;
            }
        }
        if aug[best * w + col].abs() < 1e-300 {
            return None;
        }
        if best != col {
            for j in 0..w {
                aug.swap(col * w + j, best * w + j);
            }
        }
        let pivot = aug[col * w + col];
        for j in 0..w {
            aug[col * w + j] /= pivot;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = aug[r * w + col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..w {
                aug[r * w + j] -= factor * aug[col * w + j];
            }
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            inv[i * n + j] = aug[i * w + n + j];
        }
    }
    Some(inv)
}

/// Log-determinant by LU factorization with partial pivoting. `None` when
/// singular or when the determinant is not positive.
pub fn lu_logdet(a: &[f64], n: usize) -> Option<f64> {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut sign = 1.0f64;
    let mut logdet = 0.0f64;
    for col in 0..n {
        let mut best = col;
        for r in (col + 1)..n {
            if m[r * n + col].abs() > m[best * n + col].abs() {
                best = r;
            }
        }
        if m[best * n + col].abs() < 1e-300 {
            return None;
        }
        if best != col {
            sign = -sign;
            for j in 0..n {
                m.swap(col * n + j, best * n + j);
            }
        }
        let pivot = m[col * n + col];
        logdet += pivot.abs().ln();
        if pivot < 0.0 {
            sign = -sign;
        }
        for r in (col + 1)..n {
            let factor = m[r * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                m[r * n + j] -= factor * m[col * n + j];
            }
        }
    }
    (sign > 0.0).then_some(logdet)
}

/// Kernel matrix by direct evaluation (local loops, no shared code).
fn oracle_kernel(x: &[f64], rows: usize, x2: &[f64], cols: usize, d: usize, hp: &RbfHyperparams) -> Vec<f64> {
    let mut k = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut q = 0.0;
            for dd in 0..d {
                let diff = x[i * d + dd] - x2[j * d + dd];
                let l = hp.lengthscales[dd];
                q += diff * diff / (l * l);
            }
            k[i * cols + j] = hp.outputscale_sq * (-0.5 * q).exp();
        }
    }
    k
}

const LN_2PI: f64 = 1.8378770664093454;

/// Marginal log-likelihood by the direct dense formula
/// `-1/2 r^T K^-1 r - 1/2 log|K| - n/2 log 2 pi`.
pub fn oracle_mll(
    x: &[f64],
    n: usize,
    d: usize,
    y: &[f64],
    hp: &RbfHyperparams,
    mean: &MeanFunction,
) -> Option<f64> {
    let mut k = oracle_kernel(x, n, x, n, d, hp);
    for i in 0..n {
        k[i * n + i] += hp.noise_var;
    }
    let kinv = gauss_jordan_inverse(&k, n)?;
    let logdet = lu_logdet(&k, n)?;
    let resid: Vec<f64> = (0..n).map(|i| y[i] - mean.eval(&x[i * d..(i + 1) * d])).collect();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += resid[i] * kinv[i * n + j] * resid[j];
        }
    }
    Some(-0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * LN_2PI)
}

/// Posterior mean/variance by the direct dense formulas
/// `m(x*) + k*^T K^-1 r` and `alpha^2 + sigma^2 - k*^T K^-1 k*`.
#[allow(clippy::too_many_arguments)]
pub fn oracle_posterior(
    x: &[f64],
    n: usize,
    d: usize,
    y: &[f64],
    hp: &RbfHyperparams,
    mean: &MeanFunction,
    xq: &[f64],
    q: usize,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut k = oracle_kernel(x, n, x, n, d, hp);
    for i in 0..n {
        k[i * n + i] += hp.noise_var;
    }
    let kinv = gauss_jordan_inverse(&k, n)?;
    let resid: Vec<f64> = (0..n).map(|i| y[i] - mean.eval(&x[i * d..(i + 1) * d])).collect();
    let kstar = oracle_kernel(xq, q, x, n, d, hp);
    let mut means = Vec::with_capacity(q);
    let mut vars = Vec::with_capacity(q);
    for qi in 0..q {
        let ks = &kstar[qi * n..(qi + 1) * n];
        // kk = K^-1 k*
        let mut kk = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                kk[i] += kinv[i * n + j] * ks[j];
            }
        }
        let mut quad = 0.0;
        let mut dot = 0.0;
        for i in 0..n {
            quad += ks[i] * kk[i];
            dot += kk[i] * resid[i];
        }
        means.push(mean.eval(&xq[qi * d..(qi + 1) * d]) + dot);
        vars.push(hp.outputscale_sq + hp.noise_var - quad);
    }
    Some((means, vars))
}
