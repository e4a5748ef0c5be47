//! Exact Gaussian process regression with RBF-ARD kernels.
//!
//! Covariance between inputs `x_i`, `x_j`:
//!
//! ```text
//! k(x_i, x_j) = alpha^2 * exp(-1/2 (x_i - x_j)^T Lambda^-1 (x_i - x_j)) + delta_ij sigma^2
//! ```
//!
//! with `Lambda = diag([l_1^2, ..., l_D^2])`. Inference is dense (Cholesky
//! with a jitter fallback); see Rasmussen & Williams, "Gaussian Processes for
//! Machine Learning", ch. 2 for the posterior and marginal likelihood
//! expressions used here. Hyperparameters live in an unconstrained
//! parameterization ([`RawKernelParams`]) mapped through softplus so that
//! the outputscale stays above 1e-2 and the noise above `alpha^2 * 1e-3`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::util::{softplus, softplus_inv};

/// Lower bound on the squared outputscale.
pub const OUTPUTSCALE_FLOOR: f64 = 1e-2;
/// Noise variance is at least `NOISE_FLOOR_FACTOR * outputscale_sq`.
pub const NOISE_FLOOR_FACTOR: f64 = 1e-3;

/// Constrained RBF kernel hyperparameters for one output dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfHyperparams {
    /// One positive lengthscale per input dimension.
    pub lengthscales: Vec<f64>,
    /// Squared outputscale `alpha^2 >= 1e-2`.
    pub outputscale_sq: f64,
    /// Additive noise variance `sigma^2 >= alpha^2 * 1e-3`.
    pub noise_var: f64,
}

impl RbfHyperparams {
    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn snr(&self) -> f64 {
        (self.outputscale_sq / self.noise_var).sqrt()
    }

    /// Strict positivity and finiteness; what direct GP inference needs.
    pub fn validate_positive(&self) -> Result<()> {
        if self.lengthscales.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument("non-positive lengthscale".into()));
        }
        if !(self.outputscale_sq > 0.0 && self.outputscale_sq.is_finite()) {
            return Err(Error::InvalidArgument("non-positive outputscale".into()));
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return Err(Error::InvalidArgument("non-positive noise variance".into()));
        }
        Ok(())
    }

    /// Positivity plus the floors the constrained parameterization enforces.
    pub fn validate(&self) -> Result<()> {
        self.validate_positive()?;
        if !(self.outputscale_sq >= OUTPUTSCALE_FLOOR * (1.0 - 1e-12)) {
            return Err(Error::InvalidArgument(format!(
                "outputscale_sq {} below floor {OUTPUTSCALE_FLOOR}",
                self.outputscale_sq
            )));
        }
        if !(self.noise_var >= self.outputscale_sq * NOISE_FLOOR_FACTOR * (1.0 - 1e-12)) {
            return Err(Error::InvalidArgument(format!(
                "noise_var {} below floor {}",
                self.noise_var,
                self.outputscale_sq * NOISE_FLOOR_FACTOR
            )));
        }
        Ok(())
    }
}

/// Unconstrained kernel parameters, the representation the optimizer sees.
///
/// The constrained values are
/// `l_d = softplus(raw_lengthscales[d])`,
/// `alpha^2 = 1e-2 + softplus(raw_outputscale)`,
/// `sigma^2 = alpha^2 * 1e-3 + softplus(raw_noise)`;
/// smooth and invertible on the feasible region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawKernelParams {
    pub raw_lengthscales: Vec<f64>,
    pub raw_outputscale: f64,
    pub raw_noise: f64,
}

impl RawKernelParams {
    /// Raw parameters whose constrained values match the given targets.
    pub fn from_constrained(lengthscales: &[f64], outputscale_sq: f64, noise_var: f64) -> Self {
        let alpha_sq = outputscale_sq;
        RawKernelParams {
            raw_lengthscales: lengthscales.iter().map(|&l| softplus_inv(l)).collect(),
            raw_outputscale: softplus_inv(alpha_sq - OUTPUTSCALE_FLOOR),
            raw_noise: softplus_inv(noise_var - alpha_sq * NOISE_FLOOR_FACTOR),
        }
    }

    /// Initialization for a transition-GP output dimension:
    /// lengthscales `softplus(0)`, `alpha^2 = 1`, `sigma^2 = 0.2`.
    pub fn default_transition(input_dim: usize) -> Self {
        let ls = vec![0.0; input_dim];
        RawKernelParams {
            raw_lengthscales: ls,
            raw_outputscale: softplus_inv(1.0 - OUTPUTSCALE_FLOOR),
            raw_noise: softplus_inv(0.2 - NOISE_FLOOR_FACTOR),
        }
    }

    /// Initialization for the reward GP: lengthscales `softplus(0)`,
    /// `alpha^2` from the observed reward variance, `sigma^2 = 0.2 alpha^2`.
    pub fn default_reward(input_dim: usize, reward_variance: f64) -> Self {
        let alpha_sq = reward_variance.max(2.0 * OUTPUTSCALE_FLOOR);
        let ls = vec![0.0; input_dim];
        let mut raw = Self::from_constrained(&[1.0], alpha_sq, 0.2 * alpha_sq);
        raw.raw_lengthscales = ls;
        raw
    }
}

/// Maps unconstrained parameters to constrained hyperparameters.
pub fn constrain(raw: &RawKernelParams) -> RbfHyperparams {
    let alpha_sq = OUTPUTSCALE_FLOOR + softplus(raw.raw_outputscale);
    RbfHyperparams {
        lengthscales: raw.raw_lengthscales.iter().map(|&r| softplus(r)).collect(),
        outputscale_sq: alpha_sq,
        noise_var: alpha_sq * NOISE_FLOOR_FACTOR + softplus(raw.raw_noise),
    }
}

/// Mean function of a GP prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MeanFunction {
    /// Output dimension copies input coordinate `state_index`
    /// (inputs are `state (+) action`, so `state_index < state_dim`).
    IdentityOnState { state_index: usize },
    /// Constant prior mean.
    Constant(f64),
}

impl MeanFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            MeanFunction::IdentityOnState { state_index } => x[state_index],
            MeanFunction::Constant(c) => c,
        }
    }
}

/// Conditioning set for one GP: shared inputs and one target per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpEvidence {
    /// Row-major `N x Din`.
    pub inputs: Vec<f64>,
    pub input_dim: usize,
    /// Length-N targets.
    pub targets: Vec<f64>,
}

impl GpEvidence {
    pub fn new(inputs: Vec<f64>, input_dim: usize, targets: Vec<f64>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::EmptyEvidence);
        }
        if inputs.len() != targets.len() * input_dim {
            return Err(Error::Shape(format!(
                "evidence inputs {} != targets {} x dim {}",
                inputs.len(),
                targets.len(),
                input_dim
            )));
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GP evidence".into()));
        }
        Ok(GpEvidence {
            inputs,
            input_dim,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input_row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

/// Kernel value between two input rows, without noise.
pub fn kernel_value(a: &[f64], b: &[f64], hp: &RbfHyperparams) -> f64 {
    let mut q = 0.0;
    for ((&x, &y), &l) in a.iter().zip(b.iter()).zip(hp.lengthscales.iter()) {
        let d = (x - y) / l;
        q += d * d;
    }
    hp.outputscale_sq * (-0.5 * q).exp()
}

/// Kernel matrix `k(X, X2)`, row-major `N x M`. With `include_noise`,
/// `sigma^2` is added at matching indices `i == j` only.
pub fn kernel_matrix(
    x: &[f64],
    n: usize,
    x2: &[f64],
    m: usize,
    hp: &RbfHyperparams,
    include_noise: bool,
) -> Result<Vec<f64>> {
    let d = hp.input_dim();
    if x.len() != n * d || x2.len() != m * d {
        return Err(Error::Shape(format!(
            "kernel_matrix: {n}x{d} and {m}x{d} expected"
        )));
    }
    if x.iter().chain(x2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel_matrix inputs".into()));
    }
    let mut k = vec![0.0; n * m];
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        for j in 0..m {
            k[i * m + j] = kernel_value(xi, &x2[j * d..(j + 1) * d], hp);
        }
    }
    if include_noise {
        for i in 0..n.min(m) {
            k[i * m + i] += hp.noise_var;
        }
    }
    Ok(k)
}

/// Marginal log-likelihood `log N(y - m(X) | 0, K(X,X) + sigma^2 I)`.
pub fn mll(evidence: &GpEvidence, hp: &RbfHyperparams, mean: &MeanFunction) -> Result<f64> {
    let n = evidence.len();
    let k = kernel_matrix(&evidence.inputs, n, &evidence.inputs, n, hp, true)?;
    let (chol, _) = linalg::cholesky_with_jitter(&k, n)?;
    let resid: Vec<f64> = (0..n)
        .map(|i| evidence.targets[i] - mean.eval(evidence.input_row(i)))
        .collect();
    let mut solved = resid.clone();
    linalg::chol_solve(&chol, n, &mut solved);
    let quad: f64 = resid.iter().zip(solved.iter()).map(|(a, b)| a * b).sum();
    let logdet = linalg::logdet_from_chol(&chol, n);
    Ok(-0.5 * quad - 0.5 * logdet - 0.5 * n as f64 * LN_2PI)
}

const LN_2PI: f64 = 1.8378770664093454;

/// Precomputed posterior of a single-output GP: Cholesky factor of the noisy
/// Gram matrix and the weight vector `alpha = K^-1 (y - m(X))`.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    pub evidence: GpEvidence,
    pub hp: RbfHyperparams,
    pub mean: MeanFunction,
    chol: Vec<f64>,
    alpha: Vec<f64>,
}

impl GpPosterior {
    pub fn fit(evidence: GpEvidence, hp: RbfHyperparams, mean: MeanFunction) -> Result<Self> {
        hp.validate_positive()?;
        let n = evidence.len();
        let k = kernel_matrix(&evidence.inputs, n, &evidence.inputs, n, &hp, true)?;
        let (chol, _) = linalg::cholesky_with_jitter(&k, n)?;
        let mut alpha: Vec<f64> = (0..n)
            .map(|i| evidence.targets[i] - mean.eval(evidence.input_row(i)))
            .collect();
        linalg::chol_solve(&chol, n, &mut alpha);
        Ok(GpPosterior {
            evidence,
            hp,
            mean,
            chol,
            alpha,
        })
    }

    /// Posterior mean and variance at one query point. The variance includes
    /// the noise term, so far from evidence it reverts to
    /// `alpha^2 + sigma^2`.
    pub fn predict_one(&self, xq: &[f64]) -> (f64, f64) {
        let n = self.evidence.len();
        let mut kstar = vec![0.0; n];
        for (i, ks) in kstar.iter_mut().enumerate() {
            *ks = kernel_value(xq, self.evidence.input_row(i), &self.hp);
        }
        let mean = self.mean.eval(xq)
            + kstar
                .iter()
                .zip(self.alpha.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>();
        linalg::solve_lower(&self.chol, n, &mut kstar);
        let vsq: f64 = kstar.iter().map(|v| v * v).sum();
        let var = self.hp.outputscale_sq + self.hp.noise_var - vsq;
        (mean, var)
    }
}

/// Standard posterior prediction at `Q` query points.
pub fn posterior_predict(
    evidence: &GpEvidence,
    hp: &RbfHyperparams,
    mean: &MeanFunction,
    xq: &[f64],
    q: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = evidence.input_dim;
    if xq.len() != q * d {
        return Err(Error::Shape(format!("query: expected {q} x {d}")));
    }
    let post = GpPosterior::fit(evidence.clone(), hp.clone(), *mean)?;
    let mut means = Vec::with_capacity(q);
    let mut vars = Vec::with_capacity(q);
    for i in 0..q {
        let (m, v) = post.predict_one(&xq[i * d..(i + 1) * d]);
        means.push(m);
        vars.push(v);
    }
    Ok((means, vars))
}

/// Signal-to-noise penalty `sum_k (log(alpha_k/sigma_k) / log(10))^8` over a
/// set of kernels; keeps the outputscale/noise ratio bounded for numerical
/// stability.
pub fn snr_penalty(all_kernels: &[RbfHyperparams]) -> f64 {
    all_kernels.iter().map(snr_penalty_term).sum()
}

/// Single-kernel SNR penalty term.
pub fn snr_penalty_term(hp: &RbfHyperparams) -> f64 {
    // log(alpha/sigma) = 1/2 log(alpha^2/sigma^2)
    let t = 0.5 * (hp.outputscale_sq / hp.noise_var).ln() / 10f64.ln();
    t.powi(8)
}

/// Log-density of the Gamma(shape 1, rate 5) prior at the squared
/// outputscale: `log p(alpha^2) = log 5 - 5 alpha^2`.
pub fn hyperprior_logdensity(hp: &RbfHyperparams) -> f64 {
    5f64.ln() - 5.0 * hp.outputscale_sq
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_self_with_noise() {
        // alpha^2 = 1, sigma^2 = 0.2 at x = x': 1.2
        let hp = RbfHyperparams {
            lengthscales: vec![1.0, 1.0],
            outputscale_sq: 1.0,
            noise_var: 0.2,
        };
        let x = [0.3, -0.7];
        let k = kernel_matrix(&x, 1, &x, 1, &hp, true).unwrap();
        assert!((k[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn kernel_decay_and_unit_distance() {
        let hp = RbfHyperparams {
            lengthscales: vec![1.0],
            outputscale_sq: 1.0,
            noise_var: 0.1,
        };
        // |x - x'| = 1 at unit lengthscale: exp(-1/2)
        let k = kernel_matrix(&[0.0], 1, &[1.0], 1, &hp, false).unwrap();
        assert!((k[0] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((k[0] - 0.6065306597126334).abs() < 1e-12);
        // far apart: decays to zero
        let kfar = kernel_matrix(&[0.0], 1, &[1e4], 1, &hp, false).unwrap();
        assert!(kfar[0].abs() < 1e-300);
    }

    #[test]
    fn kernel_symmetric_exactly() {
        let hp = RbfHyperparams {
            lengthscales: vec![0.7, 1.3, 0.4],
            outputscale_sq: 1.4,
            noise_var: 0.2,
        };
        let x: Vec<f64> = (0..24).map(|i| ((i as f64) * 0.613).sin()).collect();
        let k = kernel_matrix(&x, 8, &x, 8, &hp, true).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(k[i * 8 + j].to_bits(), k[j * 8 + i].to_bits());
            }
        }
    }

    #[test]
    fn kernel_rejects_nonfinite() {
        let hp = RbfHyperparams {
            lengthscales: vec![1.0],
            outputscale_sq: 1.0,
            noise_var: 0.1,
        };
        assert!(kernel_matrix(&[f64::NAN], 1, &[0.0], 1, &hp, false).is_err());
    }

    #[test]
    fn one_point_mll_closed_form() {
        // y = m(x), K = alpha^2 + sigma^2 = 1: log N(0|0,1) = -1/2 log 2pi
        let hp = RbfHyperparams {
            lengthscales: vec![0.7],
            outputscale_sq: 0.8,
            noise_var: 0.2,
        };
        let ev = GpEvidence::new(vec![0.4], 1, vec![2.5]).unwrap();
        let v = mll(&ev, &hp, &MeanFunction::Constant(2.5)).unwrap();
        assert!((v - (-0.5 * LN_2PI)).abs() < 1e-12);
        assert!((v - (-0.9189385332046727)).abs() < 1e-12);
    }

    #[test]
    fn mll_permutation_invariant() {
        let hp = RbfHyperparams {
            lengthscales: vec![0.9, 1.3],
            outputscale_sq: 1.1,
            noise_var: 0.2,
        };
        let xs: Vec<f64> = (0..20).map(|i| ((i * 7 % 13) as f64 * 0.21).sin()).collect();
        let ys: Vec<f64> = (0..10).map(|i| (i as f64 * 0.8).cos()).collect();
        let ev = GpEvidence::new(xs.clone(), 2, ys.clone()).unwrap();
        let a = mll(&ev, &hp, &MeanFunction::Constant(0.0)).unwrap();
        // reverse row order
        let mut xs2 = Vec::new();
        let mut ys2 = Vec::new();
        for i in (0..10).rev() {
            xs2.extend_from_slice(&xs[i * 2..(i + 1) * 2]);
            ys2.push(ys[i]);
        }
        let ev2 = GpEvidence::new(xs2, 2, ys2).unwrap();
        let b = mll(&ev2, &hp, &MeanFunction::Constant(0.0)).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn posterior_interpolates_and_reverts() {
        let hp = RbfHyperparams {
            lengthscales: vec![1.0],
            outputscale_sq: 1.0,
            noise_var: 1e-8,
        };
        let ev = GpEvidence::new(vec![-1.0, 0.0, 1.0], 1, vec![0.3, -0.2, 0.8]).unwrap();
        let (m, v) =
            posterior_predict(&ev, &hp, &MeanFunction::Constant(0.0), &[0.0], 1).unwrap();
        assert!((m[0] - (-0.2)).abs() < 1e-4, "interpolation {}", m[0]);
        assert!(v[0] >= -1e-9);
        // far query reverts to the prior
        let (mf, vf) =
            posterior_predict(&ev, &hp, &MeanFunction::Constant(7.0), &[500.0], 1).unwrap();
        assert!((mf[0] - 7.0).abs() < 1e-12);
        assert!((vf[0] - (1.0 + 1e-8)).abs() < 1e-9);
    }

    #[test]
    fn posterior_variance_floor() {
        let hp = RbfHyperparams {
            lengthscales: vec![0.8],
            outputscale_sq: 1.0,
            noise_var: 0.05,
        };
        let ev = GpEvidence::new(vec![0.0, 0.5, 1.2], 1, vec![1.0, 0.0, -1.0]).unwrap();
        for q in [-0.3, 0.0, 0.77, 2.0] {
            let (_, v) =
                posterior_predict(&ev, &hp, &MeanFunction::Constant(0.0), &[q], 1).unwrap();
            assert!(v[0] >= hp.noise_var - 1e-9, "variance {} at {}", v[0], q);
        }
    }

    #[test]
    fn snr_penalty_values() {
        let mk = |alpha_sq: f64, noise: f64| RbfHyperparams {
            lengthscales: vec![1.0],
            outputscale_sq: alpha_sq,
            noise_var: noise,
        };
        // alpha = sigma: zero
        assert_eq!(snr_penalty(&[mk(0.5, 0.5)]), 0.0);
        // alpha/sigma = 10: exactly 1 per kernel
        let hp10 = mk(100.0, 1.0);
        assert!((snr_penalty_term(&hp10) - 1.0).abs() < 1e-12);
        assert!((snr_penalty(&[hp10.clone(), hp10]) - 2.0).abs() < 1e-12);
        // alpha^2 = 1, sigma^2 = 0.2: SNR = sqrt(5), term = (log10 sqrt 5)^8
        let term = snr_penalty_term(&mk(1.0, 0.2));
        let expect = (0.5 * 5f64.ln() / 10f64.ln()).powi(8);
        assert!((term - expect).abs() < 1e-15);
        assert!((term - 2.2256e-4).abs() < 1e-8);
    }

    #[test]
    fn hyperprior_values_and_normalization() {
        let mk = |alpha_sq: f64| RbfHyperparams {
            lengthscales: vec![1.0],
            outputscale_sq: alpha_sq,
            noise_var: 0.1 * alpha_sq,
        };
        assert!((hyperprior_logdensity(&mk(1.0)) - (5f64.ln() - 5.0)).abs() < 1e-12);
        assert!((hyperprior_logdensity(&mk(1.0)) - (-3.3905620875658997)).abs() < 1e-12);
        // boundary limit alpha^2 -> 0: log 5
        assert!((5f64.ln() - 1.6094379124341003).abs() < 1e-15);
        // density integrates to 1 over (0, inf): Simpson on [0, 10]
        let f = |x: f64| (5f64.ln() - 5.0 * x).exp();
        let n = 20_000;
        let h = 10.0 / n as f64;
        let mut integral = f(0.0) + f(10.0);
        for i in 1..n {
            integral += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        integral *= h / 3.0;
        assert!((integral - 1.0).abs() < 1e-9, "integral {integral}");
    }

    #[test]
    fn constrain_matches_training_inits() {
        let raw = RawKernelParams::default_transition(4);
        let hp = constrain(&raw);
        for &l in &hp.lengthscales {
            assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        }
        assert!((hp.outputscale_sq - 1.0).abs() < 1e-10);
        assert!((hp.noise_var - 0.2).abs() < 1e-10);
        hp.validate().unwrap();
    }

    #[test]
    fn constrain_respects_floors() {
        for raw_val in [-40.0, -5.0, 0.0, 3.0, 50.0] {
            let raw = RawKernelParams {
                raw_lengthscales: vec![raw_val],
                raw_outputscale: raw_val,
                raw_noise: raw_val,
            };
            let hp = constrain(&raw);
            assert!(hp.outputscale_sq >= OUTPUTSCALE_FLOOR);
            assert!(hp.noise_var >= hp.outputscale_sq * NOISE_FLOOR_FACTOR);
            assert!(hp.lengthscales[0] > 0.0);
        }
    }

    #[test]
    fn constrain_roundtrip() {
        let raw = RawKernelParams::from_constrained(&[0.4, 2.0], 1.7, 0.31);
        let hp = constrain(&raw);
        assert!((hp.lengthscales[0] - 0.4).abs() < 1e-10);
        assert!((hp.lengthscales[1] - 2.0).abs() < 1e-10);
        assert!((hp.outputscale_sq - 1.7).abs() < 1e-10);
        assert!((hp.noise_var - 0.31).abs() < 1e-10);
    }

    #[test]
    fn reward_defaults_follow_batch_variance() {
        let raw = RawKernelParams::default_reward(4, 3.0);
        let hp = constrain(&raw);
        assert!((hp.outputscale_sq - 3.0).abs() < 1e-9);
        assert!((hp.noise_var - 0.6).abs() < 1e-9);
        assert_eq!(hp.lengthscales.len(), 4);
        assert!((hp.lengthscales[0] - softplus(0.0)).abs() < 1e-12);
    }

    #[test]
    fn identity_mean_on_frozen_system() {
        // evidence with s' = s (delta targets zero): posterior mean at any
        // query returns the query state exactly
        let hp = RbfHyperparams {
            lengthscales: vec![1.0, 1.0],
            outputscale_sq: 1.0,
            noise_var: 0.1,
        };
        let inputs = vec![0.1, 0.5, -0.4, 0.2, 0.9, -0.8];
        let targets = vec![0.1, -0.4, 0.9]; // = state coordinate 0
        let ev = GpEvidence::new(inputs, 2, targets).unwrap();
        let mean = MeanFunction::IdentityOnState { state_index: 0 };
        let (m, _) = posterior_predict(&ev, &hp, &mean, &[0.33, 0.0], 1).unwrap();
        assert_eq!(m[0], 0.33);
    }
}
