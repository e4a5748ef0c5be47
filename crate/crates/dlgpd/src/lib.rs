//! Deep latent Gaussian process dynamics (DLGPD) for pixel-based control.
//!
//! The library learns a low-dimensional latent state space from image pairs
//! with a convolutional encoder/decoder, models transitions and rewards in
//! that space with exact Gaussian process regression, and plans actions with
//! cross-entropy-method model-predictive control. Adapting to modified system
//! dynamics only requires swapping the evidence the transition GP is
//! conditioned on; no gradient updates are involved.
//!
//! Module map:
//! - [`env`]: ground-truth pendulum simulator, software renderer, rollout
//!   collection, and the on-disk rollout dataset format.
//! - [`gp`]: RBF-ARD kernels, marginal log-likelihood, posterior prediction,
//!   hyperparameter constraints, priors, and the SNR penalty.
//! - [`nets`]: convolutional encoder `q(s|o)` and transposed-convolutional
//!   decoder `p(o|s)`, reparameterized sampling, Bernoulli likelihood.
//! - [`model`]: the joint four-term lower bound, the training loop, and
//!   conditioning into a queryable predictive model.
//! - [`planner`]: CEM planning and the receding-horizon control loop.
//! - [`experiments`]: dataset generation, control evaluation, the success
//!   metric, transfer studies, and latent-space exports.
//! - [`verify`]: independent oracles (dense GP formulas, finite differences)
//!   and the self-check suite behind `dlgpd verify`.
//!
//! Everything runs in f64 and is deterministic given a master seed, including
//! under the internal parallelism (work is split at fixed boundaries and
//! reduced in a fixed order).

pub mod env;
pub mod error;
pub mod experiments;
pub mod gp;
pub mod linalg;
pub mod model;
pub mod nets;
pub mod opt;
pub mod planner;
pub mod tape;
pub mod tensor;
pub mod util;
pub mod verify;

pub use error::{Error, Result};
