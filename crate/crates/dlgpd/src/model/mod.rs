//! The joint latent dynamics model: encoder/decoder networks plus transition
//! and reward GPs, trained by maximizing a four-term lower bound on the
//! likelihood of transitions in image space.
//!
//! For a batch `{O, A, O', R'}` the bound decomposes into
//! (I) reconstruction of `O'` under decoded samples of `q(S'|O')`,
//! (II) the differential entropy of `q(S'|O')`,
//! (III) the transition-GP marginal log-likelihood of `(S, A) -> S'`, and
//! (IV) the reward-GP marginal log-likelihood of `(S, A) -> R'`.
//! Expectations are estimated with a single reparameterized sample. Encoded
//! states are normalized batch-wise to zero mean and unit variance before
//! entering the GPs; the reward term sees detached latents so its gradient
//! never reaches the encoder. The minimized loss adds the SNR penalty and
//! subtracts the outputscale prior log-density.

mod checkpoint;
mod condition;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use condition::{
    compute_norm_stats, condition, ConditionedModel, EncodeContext, LatentModel,
};

use serde::{Deserialize, Serialize};

use crate::env::{Rollout, FRAME_SIZE, OBS_CHANNELS};
use crate::error::{Error, Result};
use crate::gp::RawKernelParams;
use crate::nets::{DecoderParams, DecoderSpec, EncoderParams, EncoderSpec};
use crate::opt::{Adam, AdamConfig};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::util::{standard_normal, stream, Stream};

const LN_2PI: f64 = 1.8378770664093454;

// seed-derivation tags
const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_NOISE: u64 = 3;
pub(crate) const TAG_CONDITION: u64 = 4;

/// One aligned training batch.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// `[B, 6, 64, 64]` observations `o_t`.
    pub obs: Tensor,
    /// `B` actions `a_t`.
    pub actions: Vec<f64>,
    /// `[B, 6, 64, 64]` observations `o_{t+1}`.
    pub next_obs: Tensor,
    /// `B` rewards `r_{t+1}`.
    pub rewards: Vec<f64>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.actions.len();
        if b < 2 {
            return Err(Error::InvalidArgument(
                "batch needs at least 2 transitions (normalization uses batch statistics)".into(),
            ));
        }
        if self.rewards.len() != b
            || self.obs.shape()[0] != b
            || self.next_obs.shape()[0] != b
        {
            return Err(Error::Shape("misaligned batch fields".into()));
        }
        Ok(())
    }

    /// Assembles a batch from dataset transitions given `(rollout, step)`
    /// indices.
    pub fn gather(rollouts: &[Rollout], idx: &[(usize, usize)]) -> Result<TrainBatch> {
        let b = idx.len();
        let item = OBS_CHANNELS * FRAME_SIZE * FRAME_SIZE;
        let mut obs = Vec::with_capacity(b * item);
        let mut next_obs = Vec::with_capacity(b * item);
        let mut actions = Vec::with_capacity(b);
        let mut rewards = Vec::with_capacity(b);
        for &(r, k) in idx {
            let ro = &rollouts[r];
            obs.extend(ro.observation(k).to_f64());
            next_obs.extend(ro.observation(k + 1).to_f64());
            actions.push(ro.actions[k]);
            rewards.push(ro.rewards[k]);
        }
        let batch = TrainBatch {
            obs: Tensor::from_vec(&[b, OBS_CHANNELS, FRAME_SIZE, FRAME_SIZE], obs),
            actions,
            next_obs: Tensor::from_vec(&[b, OBS_CHANNELS, FRAME_SIZE, FRAME_SIZE], next_obs),
            rewards,
        };
        batch.validate()?;
        Ok(batch)
    }
}

/// Fixed affine normalization of latent states, per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        NormStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(&v, (&m, &sd))| (v - m) / sd)
            .collect()
    }

    pub fn invert(&self, sn: &[f64]) -> Vec<f64> {
        sn.iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(&v, (&m, &sd))| v * sd + m)
            .collect()
    }
}

/// Normalizes latent sample matrices `S, S': [B, D]` jointly (statistics over
/// the concatenation, variance floored at 1e-12 under the square root).
/// Returns the normalized matrices and the recorded stats.
pub fn normalize_latents(
    s: &[f64],
    s_next: &[f64],
    batch: usize,
    dim: usize,
) -> Result<(Vec<f64>, Vec<f64>, NormStats)> {
    if s.len() != batch * dim || s_next.len() != batch * dim {
        return Err(Error::Shape("normalize_latents size mismatch".into()));
    }
    if batch < 2 {
        return Err(Error::InvalidArgument("normalize_latents needs B >= 2".into()));
    }
    let mut tape = Tape::new();
    let sv = tape.leaf(Tensor::from_vec(&[batch, dim], s.to_vec()));
    let spv = tape.leaf(Tensor::from_vec(&[batch, dim], s_next.to_vec()));
    let z = tape.concat_rows(sv, spv);
    let (zn, mean, std) = tape.normalize_cols(z);
    let zd = tape.value(zn).data();
    Ok((
        zd[..batch * dim].to_vec(),
        zd[batch * dim..].to_vec(),
        NormStats { mean, std },
    ))
}

/// All trainable parameters plus the data-derived reward floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlgpdParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    /// One kernel per latent dimension; inputs are `latent (+) action`.
    pub transition_gps: Vec<RawKernelParams>,
    pub reward_gp: RawKernelParams,
    /// Minimum reward in the training set; the reward GP's prior mean.
    pub r_min: f64,
}

impl DlgpdParams {
    pub fn latent_dim(&self) -> usize {
        self.encoder.spec.latent_dim
    }

    pub fn gp_input_dim(&self) -> usize {
        self.latent_dim() + 1
    }

    /// Fresh parameters with fan-in-scaled network init and the standard GP
    /// initialization (reward outputscale is replaced once the first batch
    /// variance is known).
    pub fn init(enc_spec: &EncoderSpec, dec_spec: &DecoderSpec, seed: u64) -> Self {
        let latent_dim = enc_spec.latent_dim;
        let gp_dim = latent_dim + 1;
        let mut rng_enc = stream(seed, &[TAG_INIT, 0]);
        let mut rng_dec = stream(seed, &[TAG_INIT, 1]);
        DlgpdParams {
            encoder: EncoderParams::init(enc_spec, &mut rng_enc),
            decoder: DecoderParams::init(dec_spec, &mut rng_dec),
            transition_gps: (0..latent_dim)
                .map(|_| RawKernelParams::default_transition(gp_dim))
                .collect(),
            reward_gp: RawKernelParams::default_reward(gp_dim, 1.0),
            r_min: 0.0,
        }
    }

    /// Canonical flat list of trainable tensors (the optimizer's order).
    pub fn to_tensor_list(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for l in &self.encoder.convs {
            out.push(l.weight.clone());
            out.push(l.bias.clone());
        }
        out.push(self.encoder.mu_head.weight.clone());
        out.push(self.encoder.mu_head.bias.clone());
        out.push(self.encoder.sigma_head.weight.clone());
        out.push(self.encoder.sigma_head.bias.clone());
        out.push(self.decoder.linear.weight.clone());
        out.push(self.decoder.linear.bias.clone());
        for l in &self.decoder.convts {
            out.push(l.weight.clone());
            out.push(l.bias.clone());
        }
        for gp in &self.transition_gps {
            out.push(Tensor::from_vec(&[gp.raw_lengthscales.len()], gp.raw_lengthscales.clone()));
            out.push(Tensor::scalar(gp.raw_outputscale));
            out.push(Tensor::scalar(gp.raw_noise));
        }
        out.push(Tensor::from_vec(
            &[self.reward_gp.raw_lengthscales.len()],
            self.reward_gp.raw_lengthscales.clone(),
        ));
        out.push(Tensor::scalar(self.reward_gp.raw_outputscale));
        out.push(Tensor::scalar(self.reward_gp.raw_noise));
        out
    }

    /// Writes a flat tensor list (same order as [`Self::to_tensor_list`])
    /// back into the structured parameters.
    pub fn assign_from_tensor_list(&mut self, list: &[Tensor]) {
        let mut it = list.iter();
        let mut next = || it.next().expect("tensor list too short").clone();
        for l in &mut self.encoder.convs {
            l.weight = next();
            l.bias = next();
        }
        self.encoder.mu_head.weight = next();
        self.encoder.mu_head.bias = next();
        self.encoder.sigma_head.weight = next();
        self.encoder.sigma_head.bias = next();
        self.decoder.linear.weight = next();
        self.decoder.linear.bias = next();
        for l in &mut self.decoder.convts {
            l.weight = next();
            l.bias = next();
        }
        for gp in &mut self.transition_gps {
            gp.raw_lengthscales = next().into_data();
            gp.raw_outputscale = next().item();
            gp.raw_noise = next().item();
        }
        self.reward_gp.raw_lengthscales = next().into_data();
        self.reward_gp.raw_outputscale = next().item();
        self.reward_gp.raw_noise = next().item();
        assert!(it.next().is_none(), "tensor list too long");
    }
}

/// Tape handles of one GP's raw parameters and their constrained values.
struct GpVars {
    raw_ls: Var,
    raw_os: Var,
    raw_nz: Var,
    ls: Var,
    outputscale: Var,
    noise: Var,
}

fn bind_gp(tape: &mut Tape, raw: &RawKernelParams) -> GpVars {
    let raw_ls = tape.leaf(Tensor::from_vec(
        &[raw.raw_lengthscales.len()],
        raw.raw_lengthscales.clone(),
    ));
    let raw_os = tape.leaf(Tensor::scalar(raw.raw_outputscale));
    let raw_nz = tape.leaf(Tensor::scalar(raw.raw_noise));
    let ls = tape.softplus(raw_ls);
    let sp_os = tape.softplus(raw_os);
    let outputscale = tape.add_scalar(sp_os, crate::gp::OUTPUTSCALE_FLOOR);
    let floor = tape.scale(outputscale, crate::gp::NOISE_FLOOR_FACTOR);
    let sp_nz = tape.softplus(raw_nz);
    let noise = tape.add(floor, sp_nz);
    GpVars {
        raw_ls,
        raw_os,
        raw_nz,
        ls,
        outputscale,
        noise,
    }
}

/// Tape handles of every trainable leaf, in [`DlgpdParams::to_tensor_list`]
/// order, plus the derived nodes the objective needs.
pub struct BoundModel {
    enc_vars: crate::nets::EncoderVars,
    dec_vars: crate::nets::DecoderVars,
    trans: Vec<GpVars>,
    reward: GpVars,
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, params: &DlgpdParams) -> Self {
        let enc_vars = params.encoder.bind(tape);
        let dec_vars = params.decoder.bind(tape);
        let trans = params
            .transition_gps
            .iter()
            .map(|g| bind_gp(tape, g))
            .collect();
        let reward = bind_gp(tape, &params.reward_gp);
        BoundModel {
            enc_vars,
            dec_vars,
            trans,
            reward,
        }
    }

    /// Leaves in optimizer order.
    pub fn ordered_leaves(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in &self.enc_vars.convs {
            out.push(*w);
            out.push(*b);
        }
        out.push(self.enc_vars.mu_head.0);
        out.push(self.enc_vars.mu_head.1);
        out.push(self.enc_vars.sigma_head.0);
        out.push(self.enc_vars.sigma_head.1);
        out.push(self.dec_vars.linear.0);
        out.push(self.dec_vars.linear.1);
        for (w, b) in &self.dec_vars.convts {
            out.push(*w);
            out.push(*b);
        }
        for g in &self.trans {
            out.push(g.raw_ls);
            out.push(g.raw_os);
            out.push(g.raw_nz);
        }
        out.push(self.reward.raw_ls);
        out.push(self.reward.raw_os);
        out.push(self.reward.raw_nz);
        out
    }

    /// Raw leaves of the reward GP: (lengthscales, outputscale, noise).
    pub fn reward_raw_vars(&self) -> (Var, Var, Var) {
        (self.reward.raw_ls, self.reward.raw_os, self.reward.raw_nz)
    }

    /// Encoder leaves only (for the gradient-stop contract).
    pub fn encoder_leaves(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in &self.enc_vars.convs {
            out.push(*w);
            out.push(*b);
        }
        out.push(self.enc_vars.mu_head.0);
        out.push(self.enc_vars.mu_head.1);
        out.push(self.enc_vars.sigma_head.0);
        out.push(self.enc_vars.sigma_head.1);
        out
    }
}

/// Tape nodes of the objective.
pub struct ElboVars {
    pub total: Var,
    pub recon: Var,
    pub entropy: Var,
    pub transition: Var,
    pub reward: Var,
    pub norm_stats: NormStats,
}

/// Scalar values of the four terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub total: f64,
    pub recon: f64,
    pub entropy: f64,
    pub transition: f64,
    pub reward: f64,
}

/// Builds the four-term bound on the tape. Draws one reparameterized sample
/// per expectation from `rng` (first the `S` noise, then the `S'` noise, both
/// row-major `[B, D]`). The training path stops the reward term's gradient at
/// the latents; gradient checks of the bare bound disable the stop.
pub fn elbo_on_tape(
    tape: &mut Tape,
    bound: &BoundModel,
    params: &DlgpdParams,
    batch: &TrainBatch,
    rng: &mut Stream,
) -> Result<ElboVars> {
    elbo_on_tape_opts(tape, bound, params, batch, rng, true)
}

/// [`elbo_on_tape`] with the reward-term gradient stop made explicit.
pub fn elbo_on_tape_opts(
    tape: &mut Tape,
    bound: &BoundModel,
    params: &DlgpdParams,
    batch: &TrainBatch,
    rng: &mut Stream,
    stop_reward_gradient: bool,
) -> Result<ElboVars> {
    batch.validate()?;
    let b = batch.len();
    let d = params.latent_dim();
    let spec = &params.encoder.spec;

    // encode o_t and o_{t+1} in one pass over the stacked batch
    let mut stacked = batch.obs.data().to_vec();
    stacked.extend_from_slice(batch.next_obs.data());
    let x = tape.constant(Tensor::from_vec(
        &[2 * b, spec.in_channels, spec.in_size, spec.in_size],
        stacked,
    ));
    let (mu, sigma) = crate::nets::encode_on_tape(tape, spec, &bound.enc_vars, x);
    let mu_s = tape.slice_rows(mu, 0, b);
    let mu_sp = tape.slice_rows(mu, b, b);
    let sigma_s = tape.slice_rows(sigma, 0, b);
    let sigma_sp = tape.slice_rows(sigma, b, b);

    // single reparameterized sample per expectation
    let eps_s = tape.constant(Tensor::fill_with(&[b, d], || standard_normal(rng)));
    let eps_sp = tape.constant(Tensor::fill_with(&[b, d], || standard_normal(rng)));
    let scaled_s = tape.mul(sigma_s, eps_s);
    let s = tape.add(mu_s, scaled_s);
    let scaled_sp = tape.mul(sigma_sp, eps_sp);
    let sp = tape.add(mu_sp, scaled_sp);

    // (I) reconstruction of O' under decoded samples of q(S'|O'); the
    // sigmoid is fused into the likelihood so the value and gradient stay
    // exact even when the decoder saturates
    let dec_logits =
        crate::nets::decode_logits_on_tape(tape, &params.decoder.spec, &bound.dec_vars, sp);
    let pixels = batch.next_obs.numel();
    let logits_flat = tape.reshape(dec_logits, &[pixels]);
    let target = tape.constant(Tensor::from_vec(&[pixels], batch.next_obs.data().to_vec()));
    let recon = tape.bernoulli_loglik_logits(target, logits_flat);

    // (II) entropy of q(S'|O'): B * D/2 (1 + log 2pi) + sum log sigma'
    let ln_sig = tape.ln(sigma_sp);
    let sum_ln = tape.sum(ln_sig);
    let entropy = tape.add_scalar(sum_ln, b as f64 * 0.5 * d as f64 * (1.0 + LN_2PI));

    // batch-wise normalization of (S, S') before the GPs
    let z = tape.concat_rows(s, sp);
    let (zn, nmean, nstd) = tape.normalize_cols(z);
    let sn = tape.slice_rows(zn, 0, b);
    let spn = tape.slice_rows(zn, b, b);
    let actions = tape.constant(Tensor::from_vec(&[b, 1], batch.actions.clone()));
    let inputs = tape.concat_cols(sn, actions);

    // (III) transition MLL per output dimension, identity mean on deltas
    let mut transition: Option<Var> = None;
    for (j, gp) in bound.trans.iter().enumerate() {
        let sn_j = tape.slice_cols(sn, j, 1);
        let spn_j = tape.slice_cols(spn, j, 1);
        let delta = tape.sub(spn_j, sn_j);
        let resid = tape.reshape(delta, &[b]);
        let k = tape.rbf_kernel(inputs, None, gp.ls, gp.outputscale);
        let kn = tape.add_diag(k, gp.noise);
        let term = tape.gaussian_mll(kn, resid)?;
        transition = Some(match transition {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let transition = transition.expect("at least one latent dimension");

    // (IV) reward MLL; in training the latents are detached so no gradient
    // reaches the encoder
    let reward_inputs = if stop_reward_gradient {
        tape.detach(inputs)
    } else {
        inputs
    };
    let resid_r = tape.constant(Tensor::from_vec(
        &[b],
        batch.rewards.iter().map(|&r| r - params.r_min).collect(),
    ));
    let k_r = tape.rbf_kernel(reward_inputs, None, bound.reward.ls, bound.reward.outputscale);
    let kn_r = tape.add_diag(k_r, bound.reward.noise);
    let reward = tape.gaussian_mll(kn_r, resid_r)?;

    let t12 = tape.add(recon, entropy);
    let t123 = tape.add(t12, transition);
    let total = tape.add(t123, reward);

    Ok(ElboVars {
        total,
        recon,
        entropy,
        transition,
        reward,
        norm_stats: NormStats {
            mean: nmean,
            std: nstd,
        },
    })
}

/// Evaluates the four-term bound (no gradients).
pub fn elbo(batch: &TrainBatch, params: &DlgpdParams, rng: &mut Stream) -> Result<ElboTerms> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, params);
    let vars = elbo_on_tape(&mut tape, &bound, params, batch, rng)?;
    Ok(ElboTerms {
        total: tape.value(vars.total).item(),
        recon: tape.value(vars.recon).item(),
        entropy: tape.value(vars.entropy).item(),
        transition: tape.value(vars.transition).item(),
        reward: tape.value(vars.reward).item(),
    })
}

/// Tape nodes of the minimized loss `-elbo + snr_penalty - hyperprior`.
pub struct LossVars {
    pub loss: Var,
    pub elbo: ElboVars,
    pub snr: Var,
    pub prior: Var,
}

/// Builds the full training loss on the tape.
pub fn training_loss_on_tape(
    tape: &mut Tape,
    bound: &BoundModel,
    params: &DlgpdParams,
    batch: &TrainBatch,
    rng: &mut Stream,
) -> Result<LossVars> {
    training_loss_on_tape_opts(tape, bound, params, batch, rng, true)
}

/// [`training_loss_on_tape`] with the reward-term gradient stop made
/// explicit (disabled only by gradient checks of the bare objective).
pub fn training_loss_on_tape_opts(
    tape: &mut Tape,
    bound: &BoundModel,
    params: &DlgpdParams,
    batch: &TrainBatch,
    rng: &mut Stream,
    stop_reward_gradient: bool,
) -> Result<LossVars> {
    let elbo = elbo_on_tape_opts(tape, bound, params, batch, rng, stop_reward_gradient)?;
    let all_gps: Vec<&GpVars> = bound.trans.iter().chain(std::iter::once(&bound.reward)).collect();

    // SNR penalty: sum_k (log(alpha_k / sigma_k) / log 10)^8
    let mut snr: Option<Var> = None;
    for gp in &all_gps {
        let ln_os = tape.ln(gp.outputscale);
        let ln_nz = tape.ln(gp.noise);
        let diff = tape.sub(ln_os, ln_nz);
        let t = tape.scale(diff, 0.5 / 10f64.ln());
        let t2 = tape.square(t);
        let t4 = tape.square(t2);
        let t8 = tape.square(t4);
        snr = Some(match snr {
            None => t8,
            Some(acc) => tape.add(acc, t8),
        });
    }
    let snr = snr.unwrap();

    // Gamma(1, 5) log-density on each outputscale: log 5 - 5 alpha^2
    let mut prior: Option<Var> = None;
    for gp in &all_gps {
        let scaled = tape.scale(gp.outputscale, -5.0);
        let term = tape.add_scalar(scaled, 5f64.ln());
        prior = Some(match prior {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let prior = prior.unwrap();

    let neg_elbo = tape.neg(elbo.total);
    let with_snr = tape.add(neg_elbo, snr);
    let loss = tape.sub(with_snr, prior);
    Ok(LossVars {
        loss,
        elbo,
        snr,
        prior,
    })
}

/// Scalar loss breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss: f64,
    pub elbo: ElboTerms,
    pub snr: f64,
    pub prior: f64,
}

/// Evaluates the training loss (no gradients).
pub fn training_loss(
    batch: &TrainBatch,
    params: &DlgpdParams,
    rng: &mut Stream,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, params);
    let vars = training_loss_on_tape(&mut tape, &bound, params, batch, rng)?;
    Ok(LossBreakdown {
        loss: tape.value(vars.loss).item(),
        elbo: ElboTerms {
            total: tape.value(vars.elbo.total).item(),
            recon: tape.value(vars.elbo.recon).item(),
            entropy: tape.value(vars.elbo.entropy).item(),
            transition: tape.value(vars.elbo.transition).item(),
            reward: tape.value(vars.elbo.reward).item(),
        },
        snr: tape.value(vars.snr).item(),
        prior: tape.value(vars.prior).item(),
    })
}

/// Training-run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Use the internal (deterministic) parallelism.
    pub parallel: bool,
    /// Print one progress line every this many epochs (0 = silent).
    pub log_every: usize,
    /// Invoke the checkpoint callback every this many epochs (0 = never).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 1024,
            epochs: 2000,
            seed: 0,
            parallel: false,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

/// Per-epoch averaged statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub elbo: f64,
    pub recon: f64,
    pub entropy: f64,
    pub transition: f64,
    pub reward: f64,
    pub snr: f64,
    pub prior: f64,
}

pub type TrainLog = Vec<EpochStats>;

/// Result of a training run.
pub struct TrainOutcome {
    pub params: DlgpdParams,
    pub norm_stats: NormStats,
    pub log: TrainLog,
}

/// Jointly trains all parameters with Adam over shuffled batches.
///
/// `r_min` is set to the dataset minimum reward before training; the reward
/// GP's outputscale is initialized to the reward variance of the first batch.
/// After the last epoch, fixed normalization statistics are computed from
/// mean encodings of every observation in the training set. Deterministic
/// given `config.seed`. A non-finite loss aborts with diagnostics.
pub fn train(
    dataset: &[Rollout],
    enc_spec: &EncoderSpec,
    dec_spec: &DecoderSpec,
    config: &TrainConfig,
    mut on_checkpoint: Option<&mut dyn FnMut(usize, &DlgpdParams, &TrainLog) -> Result<()>>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    let index: Vec<(usize, usize)> = dataset
        .iter()
        .enumerate()
        .flat_map(|(r, ro)| (0..ro.len()).map(move |k| (r, k)))
        .collect();
    let n = index.len();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 transitions".into()));
    }
    let batch_size = config.batch_size.max(2).min(n);

    let mut params = DlgpdParams::init(enc_spec, dec_spec, config.seed);
    params.r_min = dataset
        .iter()
        .flat_map(|r| r.rewards.iter().copied())
        .fold(f64::INFINITY, f64::min);

    // reward GP outputscale: variance of rewards in the first batch
    {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut stream(config.seed, &[TAG_SHUFFLE, 0]));
        let first: Vec<f64> = order[..batch_size]
            .iter()
            .map(|&i| {
                let (r, k) = index[i];
                dataset[r].rewards[k]
            })
            .collect();
        let mean = first.iter().sum::<f64>() / first.len() as f64;
        let var = first.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / first.len() as f64;
        params.reward_gp = RawKernelParams::default_reward(params.gp_input_dim(), var);
    }

    let sizes: Vec<usize> = params.to_tensor_list().iter().map(|t| t.numel()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &sizes,
    );

    let mut log: TrainLog = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut stream(config.seed, &[TAG_SHUFFLE, epoch as u64]));
        let mut starts: Vec<usize> = (0..n).step_by(batch_size).collect();
        // a trailing batch of one transition cannot be normalized; merge it
        if n % batch_size == 1 && starts.len() > 1 {
            starts.pop();
        }
        let mut acc = [0.0f64; 8];
        let mut batches = 0usize;
        for (bi, &start) in starts.iter().enumerate() {
            let end = if bi + 1 < starts.len() { starts[bi + 1] } else { n };
            let idx: Vec<(usize, usize)> = order[start..end].iter().map(|&i| index[i]).collect();
            let batch = TrainBatch::gather(dataset, &idx)?;
            let mut rng = stream(config.seed, &[TAG_NOISE, epoch as u64, bi as u64]);
            let mut tape = Tape::with_parallel(config.parallel);
            let bound = BoundModel::bind(&mut tape, &params);
            let vars = training_loss_on_tape(&mut tape, &bound, &params, &batch, &mut rng)?;
            let vals = [
                tape.value(vars.loss).item(),
                tape.value(vars.elbo.total).item(),
                tape.value(vars.elbo.recon).item(),
                tape.value(vars.elbo.entropy).item(),
                tape.value(vars.elbo.transition).item(),
                tape.value(vars.elbo.reward).item(),
                tape.value(vars.snr).item(),
                tape.value(vars.prior).item(),
            ];
            if !vals[0].is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!(
                        "loss {} (recon {}, entropy {}, transition {}, reward {}, snr {})",
                        vals[0], vals[2], vals[3], vals[4], vals[5], vals[6]
                    ),
                });
            }
            let grads = tape.backward(vars.loss);
            apply_grads(&mut params, &bound, &grads, &mut adam);
            for (a, v) in acc.iter_mut().zip(vals.iter()) {
                *a += v;
            }
            batches += 1;
            step += 1;
        }
        let inv = 1.0 / batches as f64;
        let stats = EpochStats {
            epoch,
            loss: acc[0] * inv,
            elbo: acc[1] * inv,
            recon: acc[2] * inv,
            entropy: acc[3] * inv,
            transition: acc[4] * inv,
            reward: acc[5] * inv,
            snr: acc[6] * inv,
            prior: acc[7] * inv,
        };
        if config.log_every > 0 && (epoch % config.log_every == 0 || epoch + 1 == config.epochs) {
            println!(
                "epoch={} loss={:.3} elbo={:.3} recon={:.3} entropy={:.3} transition={:.3} reward={:.3} snr={:.4}",
                stats.epoch, stats.loss, stats.elbo, stats.recon, stats.entropy, stats.transition,
                stats.reward, stats.snr
            );
        }
        log.push(stats);
        if config.checkpoint_every > 0
            && (epoch + 1) % config.checkpoint_every == 0
            && epoch + 1 != config.epochs
        {
            if let Some(cb) = on_checkpoint.as_deref_mut() {
                cb(epoch, &params, &log)?;
            }
        }
    }

    let norm_stats = compute_norm_stats(&params, dataset, config.parallel)?;
    Ok(TrainOutcome {
        params,
        norm_stats,
        log,
    })
}

/// Harvests gradients in canonical order and applies one Adam step.
fn apply_grads(params: &mut DlgpdParams, bound: &BoundModel, grads: &Gradients, adam: &mut Adam) {
    let leaves = bound.ordered_leaves();
    let mut tensors = params.to_tensor_list();
    let glist: Vec<Tensor> = leaves
        .iter()
        .zip(tensors.iter())
        .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
        .collect();
    {
        let mut refs: Vec<&mut Tensor> = tensors.iter_mut().collect();
        adam.step(&mut refs, &glist);
    }
    params.assign_from_tensor_list(&tensors);
}

/// Fisher-Yates with a seeded stream.
fn shuffle(order: &mut [usize], rng: &mut Stream) {
    use rand::RngExt;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}
