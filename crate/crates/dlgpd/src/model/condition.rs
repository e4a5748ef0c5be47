//! Conditioning the trained model on evidence rollouts, and the query
//! interface the planner uses.
//!
//! Conditioning encodes every evidence observation once, draws one
//! reparameterized sample per observation (seeded, cached for the lifetime of
//! the conditioned model), normalizes with the fixed training statistics, and
//! assembles the transition evidence `(S, A) -> S'` and reward evidence
//! `(S, A) -> R'`. Swapping the evidence re-conditions the model on new
//! dynamics with zero gradient updates.

use serde::{Deserialize, Serialize};

use super::{DlgpdParams, NormStats, TAG_CONDITION};
use crate::env::{Observation, PhysicalState, Rollout};
use crate::error::{Error, Result};
use crate::gp::{constrain, GpEvidence, GpPosterior, MeanFunction, RbfHyperparams};
use crate::nets::{encode_batch, EncoderParams};
use crate::util::{standard_normal, stream};

/// What the planner sees at each control step: the latest observation, plus
/// (for oracle models only) the true simulator state.
pub struct EncodeContext<'a> {
    pub obs: &'a Observation,
    pub true_state: Option<&'a PhysicalState>,
}

/// Query interface for planning: one-step latent transition and reward
/// posteriors plus the state encoding of an observation. Implemented by the
/// learned [`ConditionedModel`] and by the true-dynamics oracle used to
/// validate the planner in isolation.
pub trait LatentModel: Sync {
    fn latent_dim(&self) -> usize;

    /// Posterior mean and (diagonal) variance of `s_{t+1}` given `(s_t, a_t)`.
    fn predict_next(&self, s: &[f64], a: f64) -> Result<(Vec<f64>, Vec<f64>)>;

    /// Posterior mean and variance of `r_{t+1}` given `(s_t, a_t)`.
    fn predict_reward(&self, s: &[f64], a: f64) -> Result<(f64, f64)>;

    /// Deterministic state encoding of the latest observation (the mean
    /// encoding for learned models).
    fn encode_step(&self, ctx: &EncodeContext) -> Result<Vec<f64>>;
}

/// Summary of the evidence a model was conditioned on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceInfo {
    pub rollouts: usize,
    pub points: usize,
    pub seed: u64,
}

/// Encoder + fixed normalization + GP posteriors; immutable after
/// construction and safe for concurrent queries.
pub struct ConditionedModel {
    pub encoder: EncoderParams,
    pub norm: NormStats,
    pub r_min: f64,
    pub info: EvidenceInfo,
    transition: Vec<GpPosterior>,
    reward: GpPosterior,
}

impl ConditionedModel {
    /// Direct construction from explicit evidence matrices (testing and
    /// oracle studies). `inputs` is row-major `N x (D + 1)` of normalized
    /// states and actions; `next_states` is `N x D`; `rewards` length `N`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        encoder: EncoderParams,
        norm: NormStats,
        r_min: f64,
        trans_hp: Vec<RbfHyperparams>,
        reward_hp: RbfHyperparams,
        inputs: Vec<f64>,
        next_states: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        let d = trans_hp.len();
        let din = d + 1;
        let n = rewards.len();
        if inputs.len() != n * din || next_states.len() != n * d {
            return Err(Error::Shape("evidence matrix dimensions".into()));
        }
        let mut transition = Vec::with_capacity(d);
        for (j, hp) in trans_hp.into_iter().enumerate() {
            let targets: Vec<f64> = (0..n).map(|i| next_states[i * d + j]).collect();
            let ev = GpEvidence::new(inputs.clone(), din, targets)?;
            transition.push(GpPosterior::fit(
                ev,
                hp,
                MeanFunction::IdentityOnState { state_index: j },
            )?);
        }
        let reward_ev = GpEvidence::new(inputs, din, rewards)?;
        let reward = GpPosterior::fit(reward_ev, reward_hp, MeanFunction::Constant(r_min))?;
        Ok(ConditionedModel {
            encoder,
            norm,
            r_min,
            info: EvidenceInfo {
                rollouts: 0,
                points: n,
                seed: 0,
            },
            transition,
            reward,
        })
    }

    pub fn evidence_len(&self) -> usize {
        self.reward.evidence.len()
    }

    /// Mean encoding of an observation, normalized into GP input space.
    pub fn encode_mean(&self, obs: &Observation) -> Result<Vec<f64>> {
        let lg = crate::nets::encode(obs, &self.encoder)?;
        Ok(self.norm.apply(&lg.mean))
    }
}

impl LatentModel for ConditionedModel {
    fn latent_dim(&self) -> usize {
        self.transition.len()
    }

    fn predict_next(&self, s: &[f64], a: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if s.len() != self.latent_dim() || !a.is_finite() || s.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("predict_next inputs".into()));
        }
        let mut x = s.to_vec();
        x.push(a);
        let mut means = Vec::with_capacity(s.len());
        let mut vars = Vec::with_capacity(s.len());
        for gp in &self.transition {
            let (m, v) = gp.predict_one(&x);
            means.push(m);
            vars.push(v);
        }
        Ok((means, vars))
    }

    fn predict_reward(&self, s: &[f64], a: f64) -> Result<(f64, f64)> {
        if s.len() != self.latent_dim() || !a.is_finite() || s.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("predict_reward inputs".into()));
        }
        let mut x = s.to_vec();
        x.push(a);
        Ok(self.reward.predict_one(&x))
    }

    fn encode_step(&self, ctx: &EncodeContext) -> Result<Vec<f64>> {
        self.encode_mean(ctx.obs)
    }
}

/// Encodes every observation of a rollout set in fixed-size chunks. Returns
/// `(means, stddevs)` row-major over observations in rollout order.
fn encode_all_observations(
    encoder: &EncoderParams,
    rollouts: &[Rollout],
    parallel: bool,
) -> (Vec<f64>, Vec<f64>) {
    let d = encoder.spec.latent_dim;
    let item = encoder.spec.in_channels * encoder.spec.in_size * encoder.spec.in_size;
    let obs_index: Vec<(usize, usize)> = rollouts
        .iter()
        .enumerate()
        .flat_map(|(r, ro)| (0..ro.num_observations()).map(move |t| (r, t)))
        .collect();
    let total = obs_index.len();
    let mut means = vec![0.0; total * d];
    let mut stds = vec![0.0; total * d];
    const CHUNK: usize = 128;
    let chunks: Vec<(usize, Vec<f64>, Vec<f64>)> = {
        let work = |range: std::ops::Range<usize>| -> (usize, Vec<f64>, Vec<f64>) {
            let count = range.len();
            let mut rows = Vec::with_capacity(count * item);
            for &(r, t) in &obs_index[range.clone()] {
                rows.extend(rollouts[r].observation(t).to_f64());
            }
            let lgs = encode_batch(encoder, &rows, count);
            let mut m = Vec::with_capacity(count * d);
            let mut s = Vec::with_capacity(count * d);
            for lg in lgs {
                m.extend(lg.mean);
                s.extend(lg.stddev);
            }
            (range.start, m, s)
        };
        let ranges: Vec<std::ops::Range<usize>> = (0..total)
            .step_by(CHUNK)
            .map(|s| s..(s + CHUNK).min(total))
            .collect();
        if parallel {
            use rayon::prelude::*;
            ranges.into_par_iter().map(work).collect()
        } else {
            ranges.into_iter().map(work).collect()
        }
    };
    for (start, m, s) in chunks {
        means[start * d..start * d + m.len()].copy_from_slice(&m);
        stds[start * d..start * d + s.len()].copy_from_slice(&s);
    }
    (means, stds)
}

/// Fixed test-time normalization statistics: mean encodings of every
/// observation in the training set, one pass, population statistics per
/// latent dimension (stddev floored at 1e-6).
pub fn compute_norm_stats(
    params: &DlgpdParams,
    dataset: &[Rollout],
    parallel: bool,
) -> Result<NormStats> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let d = params.latent_dim();
    let (means, _) = encode_all_observations(&params.encoder, dataset, parallel);
    let m = means.len() / d;
    let mut mean = vec![0.0; d];
    for row in means.chunks_exact(d) {
        for (a, &v) in mean.iter_mut().zip(row.iter()) {
            *a += v;
        }
    }
    for a in mean.iter_mut() {
        *a /= m as f64;
    }
    let mut var = vec![0.0; d];
    for row in means.chunks_exact(d) {
        for ((a, &v), &mu) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
            let dv = v - mu;
            *a += dv * dv;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|&v| (v / m as f64 + crate::tape::NORM_EPS).sqrt())
        .collect();
    Ok(NormStats { mean, std })
}

/// Conditions the GPs on encoded evidence rollouts.
///
/// Draws one reparameterized sample per evidence observation (seeded; cached
/// in the returned model so planning is deterministic per conditioning
/// event), normalizes with the fixed `norm` statistics, and fits the
/// transition and reward posteriors.
pub fn condition(
    params: &DlgpdParams,
    norm: &NormStats,
    evidence_rollouts: &[Rollout],
    seed: u64,
    parallel: bool,
) -> Result<ConditionedModel> {
    if evidence_rollouts.is_empty() {
        return Err(Error::EmptyEvidence);
    }
    let d = params.latent_dim();
    let (means, stds) = encode_all_observations(&params.encoder, evidence_rollouts, parallel);
    let total_obs = means.len() / d;

    // one sample per observation, drawn in observation order
    let mut rng = stream(seed, &[TAG_CONDITION]);
    let mut samples = vec![0.0; total_obs * d];
    for i in 0..total_obs * d {
        samples[i] = means[i] + stds[i] * standard_normal(&mut rng);
    }
    // normalize with the fixed stats
    for row in samples.chunks_exact_mut(d) {
        for (v, (&mu, &sd)) in row.iter_mut().zip(norm.mean.iter().zip(norm.std.iter())) {
            *v = (*v - mu) / sd;
        }
    }

    // assemble evidence rows per transition
    let n: usize = evidence_rollouts.iter().map(|r| r.len()).sum();
    let din = d + 1;
    let mut inputs = Vec::with_capacity(n * din);
    let mut next_states = Vec::with_capacity(n * d);
    let mut rewards = Vec::with_capacity(n);
    let mut base = 0usize;
    for ro in evidence_rollouts {
        for k in 0..ro.len() {
            let s_row = &samples[(base + k) * d..(base + k + 1) * d];
            let sp_row = &samples[(base + k + 1) * d..(base + k + 2) * d];
            inputs.extend_from_slice(s_row);
            inputs.push(ro.actions[k]);
            next_states.extend_from_slice(sp_row);
            rewards.push(ro.rewards[k]);
        }
        base += ro.num_observations();
    }

    let trans_hp: Vec<RbfHyperparams> = params.transition_gps.iter().map(constrain).collect();
    let reward_hp = constrain(&params.reward_gp);
    let mut cm = ConditionedModel::from_parts(
        params.encoder.clone(),
        norm.clone(),
        params.r_min,
        trans_hp,
        reward_hp,
        inputs,
        next_states,
        rewards,
    )?;
    cm.info = EvidenceInfo {
        rollouts: evidence_rollouts.len(),
        points: n,
        seed,
    };
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{collect_rollout, InitDistribution, PendulumParams, UniformPolicy};
    use crate::model::tests::tiny_params;
    use crate::nets::{DecoderSpec, EncoderSpec};

    fn sample_rollouts(n: usize, len: usize, seed: u64) -> Vec<Rollout> {
        let params = PendulumParams::default();
        let init = InitDistribution::excitation();
        (0..n)
            .map(|i| {
                let mut policy = UniformPolicy { bound: 2.0 };
                let mut rng = stream(seed, &[i as u64]);
                collect_rollout(&params, &init, &mut policy, len, &mut rng, true).unwrap()
            })
            .collect()
    }

    fn standard_params(seed: u64) -> DlgpdParams {
        let mut p = DlgpdParams::init(&EncoderSpec::standard(), &DecoderSpec::standard(), seed);
        p.r_min = -12.0;
        p
    }

    #[test]
    fn evidence_point_count() {
        let params = standard_params(3);
        let rollouts = sample_rollouts(4, 7, 5);
        let norm = compute_norm_stats(&params, &rollouts, false).unwrap();
        let cm = condition(&params, &norm, &rollouts, 9, false).unwrap();
        assert_eq!(cm.evidence_len(), 4 * 7);
        assert_eq!(cm.info.rollouts, 4);
    }

    #[test]
    fn conditioning_deterministic_given_seed() {
        let params = standard_params(3);
        let rollouts = sample_rollouts(2, 5, 6);
        let norm = compute_norm_stats(&params, &rollouts, false).unwrap();
        let cm1 = condition(&params, &norm, &rollouts, 42, false).unwrap();
        let cm2 = condition(&params, &norm, &rollouts, 42, false).unwrap();
        // query at an actual evidence point so predictions depend on the
        // sampled evidence, not just the prior
        let row = cm1.reward.evidence.input_row(0).to_vec();
        let (s, a) = (row[..3].to_vec(), row[3]);
        let (m1, v1) = cm1.predict_next(&s, a).unwrap();
        let (m2, v2) = cm2.predict_next(&s, a).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(v1, v2);
        let cm3 = condition(&params, &norm, &rollouts, 43, false).unwrap();
        let row3 = cm3.reward.evidence.input_row(0).to_vec();
        let (m3, _) = cm3.predict_next(&row3[..3], row3[3]).unwrap();
        assert_ne!(m1, m3, "different seeds draw different evidence samples");
    }

    #[test]
    fn swapping_transition_evidence_keeps_reward_predictions() {
        // conditional independence: two models sharing reward evidence but
        // with different transition evidence must agree on rewards
        let params = standard_params(1);
        let enc = params.encoder.clone();
        let norm = NormStats::identity(3);
        let mk_inputs = |seed: f64| -> (Vec<f64>, Vec<f64>) {
            let n = 6;
            let mut inputs = Vec::new();
            let mut next = Vec::new();
            for i in 0..n {
                for j in 0..3 {
                    inputs.push(((i * 3 + j) as f64 * 0.31 + seed).sin());
                }
                inputs.push(((i * 7) as f64 * 0.17 + seed).cos());
                for j in 0..3 {
                    next.push(((i * 3 + j) as f64 * 0.23 + seed).cos());
                }
            }
            (inputs, next)
        };
        let hp = crate::gp::RbfHyperparams {
            lengthscales: vec![1.0; 4],
            outputscale_sq: 1.0,
            noise_var: 0.1,
        };
        let (inputs, next) = mk_inputs(0.0);
        let rewards: Vec<f64> = (0..6).map(|i| -(i as f64) - 1.0).collect();
        let a = ConditionedModel::from_parts(
            enc.clone(),
            norm.clone(),
            -6.0,
            vec![hp.clone(); 3],
            hp.clone(),
            inputs.clone(),
            next,
            rewards.clone(),
        )
        .unwrap();
        // different transition targets, same (inputs, rewards)
        let (_, next_b) = mk_inputs(5.0);
        let b = ConditionedModel::from_parts(
            enc,
            norm,
            -6.0,
            vec![hp.clone(); 3],
            hp,
            inputs,
            next_b,
            rewards,
        )
        .unwrap();
        let s = [0.3, -0.4, 0.2];
        let ra = a.predict_reward(&s, 0.5).unwrap();
        let rb = b.predict_reward(&s, 0.5).unwrap();
        assert_eq!(ra, rb);
        let ta = a.predict_next(&s, 0.5).unwrap();
        let tb = b.predict_next(&s, 0.5).unwrap();
        assert_ne!(ta.0, tb.0);
    }

    #[test]
    fn prior_reversion_far_from_evidence() {
        let params = standard_params(2);
        let rollouts = sample_rollouts(1, 6, 2);
        let norm = compute_norm_stats(&params, &rollouts, false).unwrap();
        let cm = condition(&params, &norm, &rollouts, 1, false).unwrap();
        let far = [300.0, -250.0, 400.0];
        let (m, _) = cm.predict_next(&far, 0.0).unwrap();
        for (a, b) in m.iter().zip(far.iter()) {
            assert!((a - b).abs() < 1e-9, "identity prior mean far away");
        }
        let (rm, rv) = cm.predict_reward(&far, 0.0).unwrap();
        assert!((rm - cm.r_min).abs() < 1e-9, "reward reverts to r_min");
        let hp = constrain(&params.reward_gp);
        assert!((rv - (hp.outputscale_sq + hp.noise_var)).abs() < 1e-9);
    }

    #[test]
    fn predictions_independent_of_evidence_row_order() {
        let params = standard_params(4);
        let rollouts = sample_rollouts(2, 5, 11);
        let norm = compute_norm_stats(&params, &rollouts, false).unwrap();
        let fwd = condition(&params, &norm, &rollouts, 5, false).unwrap();
        let rev_rollouts: Vec<Rollout> = rollouts.iter().rev().cloned().collect();
        // seed the samples identically per observation: conditioning draws in
        // observation order, so reversing rollouts permutes the noise too; we
        // instead compare against from_parts with permuted rows
        let n = fwd.evidence_len();
        let din = 4;
        let ev = &fwd.reward.evidence;
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut inputs = Vec::new();
        let mut next_states = Vec::new();
        let mut rewards = Vec::new();
        for &i in &perm {
            inputs.extend_from_slice(&ev.inputs[i * din..(i + 1) * din]);
            for gp in &fwd.transition {
                next_states.push(gp.evidence.targets[i]);
            }
            rewards.push(ev.targets[i]);
        }
        let _ = rev_rollouts;
        let permuted = ConditionedModel::from_parts(
            params.encoder.clone(),
            norm.clone(),
            params.r_min,
            params.transition_gps.iter().map(constrain).collect(),
            constrain(&params.reward_gp),
            inputs,
            next_states,
            rewards,
        )
        .unwrap();
        let s = [0.2, 0.1, -0.3];
        let (m1, v1) = fwd.predict_next(&s, -0.5).unwrap();
        let (m2, v2) = permuted.predict_next(&s, -0.5).unwrap();
        for (a, b) in m1.iter().zip(m2.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in v1.iter().zip(v2.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn inverted_action_evidence_symmetry() {
        // conditioning on {(s, -a) -> s'} yields f'(s, a) = f(s, -a) exactly
        let enc = tiny_params(5).encoder;
        let norm = NormStats::identity(3);
        let hp = crate::gp::RbfHyperparams {
            lengthscales: vec![0.8, 1.1, 0.9, 1.3],
            outputscale_sq: 1.2,
            noise_var: 0.15,
        };
        let n = 8;
        let mut inputs = Vec::new();
        let mut flipped = Vec::new();
        let mut next = Vec::new();
        let mut rewards = Vec::new();
        for i in 0..n {
            let mut row = Vec::new();
            for j in 0..3 {
                row.push(((i * 3 + j) as f64 * 0.37).sin());
            }
            let a = ((i * 5) as f64 * 0.29).cos() * 1.8;
            inputs.extend_from_slice(&row);
            inputs.push(a);
            flipped.extend_from_slice(&row);
            flipped.push(-a);
            for j in 0..3 {
                next.push(((i * 3 + j) as f64 * 0.41).cos());
            }
            rewards.push(-(i as f64 * 0.3) - 0.5);
        }
        let base = ConditionedModel::from_parts(
            enc.clone(),
            norm.clone(),
            -3.0,
            vec![hp.clone(); 3],
            hp.clone(),
            inputs,
            next.clone(),
            rewards.clone(),
        )
        .unwrap();
        let inverted = ConditionedModel::from_parts(
            enc,
            norm,
            -3.0,
            vec![hp.clone(); 3],
            hp,
            flipped,
            next,
            rewards,
        )
        .unwrap();
        for t in 0..10 {
            let s = [
                (t as f64 * 0.7).sin(),
                (t as f64 * 0.3).cos(),
                (t as f64 * 0.9).sin() * 0.5,
            ];
            let a = (t as f64 * 0.53).sin() * 2.0;
            let (m_inv, v_inv) = inverted.predict_next(&s, a).unwrap();
            let (m_base, v_base) = base.predict_next(&s, -a).unwrap();
            for (x, y) in m_inv.iter().zip(m_base.iter()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
            for (x, y) in v_inv.iter().zip(v_base.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
