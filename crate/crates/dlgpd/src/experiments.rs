//! Experiment protocol: dataset generation, control evaluation, the success
//! criterion, transfer studies with evidence swapping, and latent-space
//! exports.
//!
//! Results land under `results/<experiment>/<variant>/<subset>/trial_<k>.json`
//! with an aggregated `summary.csv`; latent exports are tab-separated text.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{
    collect_rollout, load_dataset, make_variant, save_dataset, DatasetManifest, InitDistribution,
    PendulumParams, PhysicalState, Rollout, UniformPolicy, Variant, FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::model::{condition, ConditionedModel, DlgpdParams, LatentModel, NormStats};
use crate::nets::encode_batch;
use crate::planner::{mpc_run, CemConfig, Trajectory};
use crate::util::{stream, substream};

/// Episode length of control evaluations.
pub const EVAL_LEN: usize = 150;
/// The trailing window the success criterion inspects.
pub const SUCCESS_WINDOW: usize = 25;
/// Rewards in the window must strictly exceed this.
pub const SUCCESS_THRESHOLD: f64 = -1.0;

// seed tags
const TAG_DATASET: u64 = 20;
const TAG_EVAL_INIT: u64 = 21;
const TAG_EVAL_MPC: u64 = 22;
const TAG_CONDITION_SEED: u64 = 23;

/// Full experiment-protocol configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub train_rollouts: usize,
    pub evidence_pools: usize,
    pub pool_rollouts: usize,
    pub rollout_len: usize,
    pub eval_len: usize,
    pub subset_sizes: Vec<usize>,
    pub control_trials: usize,
    pub variants: Vec<Variant>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train_rollouts: 500,
            evidence_pools: 3,
            pool_rollouts: 200,
            rollout_len: 28,
            eval_len: EVAL_LEN,
            subset_sizes: vec![10, 20, 50, 100, 200],
            control_trials: 3,
            variants: vec![Variant::InvertedAction, Variant::Mass(0.2), Variant::Mass(1.5)],
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_rollouts < 1 || self.pool_rollouts < 1 || self.rollout_len < 1 {
            return Err(Error::Config("counts must be >= 1".into()));
        }
        if self.subset_sizes.iter().any(|&s| s == 0 || s > self.pool_rollouts) {
            return Err(Error::Config(
                "subset sizes must be in 1..=pool_rollouts".into(),
            ));
        }
        Ok(())
    }
}

/// Collects one dataset of `count` rollouts under `params`. Each rollout gets
/// an independent stream derived from `(seed, kind_tag, index)`, so datasets
/// regenerate byte-identically and resume cleanly.
pub fn generate_rollouts(
    params: &PendulumParams,
    init: &InitDistribution,
    count: usize,
    length: usize,
    seed: u64,
    kind_tag: u64,
) -> Result<Vec<Rollout>> {
    (0..count)
        .map(|i| {
            let mut policy = UniformPolicy { bound: 2.0 };
            let mut rng = stream(seed, &[TAG_DATASET, kind_tag, i as u64]);
            collect_rollout(params, init, &mut policy, length, &mut rng, true)
        })
        .collect()
}

/// Dataset directory layout under a root:
/// `train/`, `evidence/<variant>/pool_<i>/`.
pub fn dataset_dirs(root: &Path, config: &ExperimentConfig) -> Vec<(PathBuf, String, usize)> {
    let mut out = vec![(root.join("train"), "base".to_string(), 0usize)];
    let mut variants = vec![Variant::Base];
    variants.extend(config.variants.iter().copied());
    for v in variants {
        for p in 0..config.evidence_pools {
            out.push((
                root.join("evidence").join(v.slug()).join(format!("pool_{p}")),
                v.slug(),
                p,
            ));
        }
    }
    out
}

/// Generates the training set and all evidence pools (base + each variant)
/// under `root`. Existing files are kept; regeneration is byte-identical.
pub fn generate_datasets(root: &Path, base: &PendulumParams, config: &ExperimentConfig) -> Result<()> {
    config.validate()?;
    let init = InitDistribution::excitation();

    let kind_tag_of = |variant: &str, pool: usize| -> u64 {
        substream(0x444c_4750, &[hash_str(variant), pool as u64])
    };

    // training set (base dynamics)
    let train_dir = root.join("train");
    let rollouts = generate_rollouts(
        base,
        &init,
        config.train_rollouts,
        config.rollout_len,
        config.seed,
        kind_tag_of("train", 0),
    )?;
    save_dataset(
        &train_dir,
        &DatasetManifest {
            format_version: FORMAT_VERSION,
            env: *base,
            variant: "base".into(),
            seed: config.seed,
            rollout_count: config.train_rollouts,
            rollout_len: config.rollout_len,
        },
        &rollouts,
    )?;
    drop(rollouts);

    // evidence pools per variant (including base)
    let mut variants = vec![Variant::Base];
    variants.extend(config.variants.iter().copied());
    for v in variants {
        let params = make_variant(base, v)?;
        for p in 0..config.evidence_pools {
            let dir = root.join("evidence").join(v.slug()).join(format!("pool_{p}"));
            let rollouts = generate_rollouts(
                &params,
                &init,
                config.pool_rollouts,
                config.rollout_len,
                config.seed,
                kind_tag_of(&v.slug(), p),
            )?;
            save_dataset(
                &dir,
                &DatasetManifest {
                    format_version: FORMAT_VERSION,
                    env: params,
                    variant: v.slug(),
                    seed: config.seed,
                    rollout_count: config.pool_rollouts,
                    rollout_len: config.rollout_len,
                },
                &rollouts,
            )?;
        }
    }
    Ok(())
}

fn hash_str(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// FNV-1a over all parameter bits; detects any parameter mutation.
pub fn params_hash(params: &DlgpdParams) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |v: f64| {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
    };
    for t in params.to_tensor_list() {
        for &v in t.data() {
            eat(v);
        }
    }
    eat(params.r_min);
    h
}

/// Appendix-style success check: a 150-step episode is successful when all of
/// the last 25 rewards strictly exceed -1.
pub fn success(trajectory: &Trajectory) -> Result<bool> {
    success_from_rewards(&trajectory.rewards)
}

/// [`success`] on a bare reward sequence.
pub fn success_from_rewards(rewards: &[f64]) -> Result<bool> {
    if rewards.len() != EVAL_LEN {
        return Err(Error::InvalidArgument(format!(
            "success needs a {EVAL_LEN}-step trajectory, got {}",
            rewards.len()
        )));
    }
    Ok(rewards[EVAL_LEN - SUCCESS_WINDOW..]
        .iter()
        .all(|&r| r > SUCCESS_THRESHOLD))
}

/// One control trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub init: PhysicalState,
    pub cumulative_reward: f64,
    pub success: bool,
    pub rewards: Vec<f64>,
    pub actions: Vec<f64>,
    pub seed: u64,
}

/// One (variant, evidence source, subset, pool) cell of the result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: String,
    pub evidence_source: String,
    pub subset: usize,
    pub pool: usize,
    pub condition_seed: u64,
    pub trials: Vec<TrialResult>,
}

impl CellResult {
    pub fn mean_reward(&self) -> f64 {
        self.trials.iter().map(|t| t.cumulative_reward).sum::<f64>() / self.trials.len() as f64
    }

    pub fn success_rate(&self) -> f64 {
        self.trials.iter().filter(|t| t.success).count() as f64 / self.trials.len() as f64
    }
}

/// Conditions on the first `subset_size` rollouts of a pool and runs control
/// trials with fresh hanging-down initializations in the given environment.
/// Never mutates model parameters (hash-checked).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_control(
    params: &DlgpdParams,
    norm: &NormStats,
    pool: &[Rollout],
    subset_size: usize,
    env: &PendulumParams,
    trials: usize,
    cem: &CemConfig,
    eval_len: usize,
    seed: u64,
    parallel: bool,
) -> Result<Vec<TrialResult>> {
    if subset_size == 0 || subset_size > pool.len() {
        return Err(Error::Config(format!(
            "subset size {subset_size} outside pool of {}",
            pool.len()
        )));
    }
    let hash_before = params_hash(params);
    let condition_seed = substream(seed, &[TAG_CONDITION_SEED]);
    let cm = condition(params, norm, &pool[..subset_size], condition_seed, parallel)?;
    let results = run_trials(&cm, env, trials, cem, eval_len, seed, parallel)?;
    assert_eq!(params_hash(params), hash_before, "parameters were mutated");
    Ok(results)
}

/// Runs `trials` MPC episodes with a provided model.
pub fn run_trials(
    model: &dyn LatentModel,
    env: &PendulumParams,
    trials: usize,
    cem: &CemConfig,
    eval_len: usize,
    seed: u64,
    parallel: bool,
) -> Result<Vec<TrialResult>> {
    let init_dist = InitDistribution::hanging_down();
    let mut out = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = stream(seed, &[TAG_EVAL_INIT, trial as u64]);
        let init = init_dist.sample(&mut rng);
        let mpc_seed = substream(seed, &[TAG_EVAL_MPC, trial as u64]);
        let cem_cfg = CemConfig { parallel, ..*cem };
        let traj = mpc_run(env, init, model, &cem_cfg, eval_len, mpc_seed)?;
        let succ = if eval_len == EVAL_LEN {
            success(&traj)?
        } else {
            false
        };
        out.push(TrialResult {
            trial,
            init,
            cumulative_reward: traj.cumulative_reward(),
            success: succ,
            rewards: traj.rewards,
            actions: traj.actions,
            seed: mpc_seed,
        });
    }
    Ok(out)
}

/// Which pool feeds the evidence during transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvidenceSource {
    /// Evidence collected in the modified environment.
    Matching,
    /// Evidence from the original (base) environment.
    Mismatching,
}

impl EvidenceSource {
    pub fn slug(&self) -> &'static str {
        match self {
            EvidenceSource::Matching => "matching",
            EvidenceSource::Mismatching => "mismatching",
        }
    }
}

/// The transfer protocol for one variant: condition the GPs on evidence from
/// the matching (modified) or mismatching (original) environment and evaluate
/// control in the modified environment, with zero gradient updates.
#[allow(clippy::too_many_arguments)]
pub fn transfer_eval(
    params: &DlgpdParams,
    norm: &NormStats,
    datasets_root: &Path,
    variant: Variant,
    source: EvidenceSource,
    subset_sizes: &[usize],
    pool_index: usize,
    cem: &CemConfig,
    trials: usize,
    seed: u64,
    parallel: bool,
) -> Result<Vec<CellResult>> {
    let env = make_variant(&PendulumParams::default(), variant)?;
    let pool_variant = match source {
        EvidenceSource::Matching => variant,
        EvidenceSource::Mismatching => Variant::Base,
    };
    let pool_dir = datasets_root
        .join("evidence")
        .join(pool_variant.slug())
        .join(format!("pool_{pool_index}"));
    let (manifest, pool) = load_dataset(&pool_dir)?;
    if manifest.variant != pool_variant.slug() {
        return Err(Error::Config(format!(
            "pool at {} holds variant {}, expected {}",
            pool_dir.display(),
            manifest.variant,
            pool_variant.slug()
        )));
    }
    let hash_before = params_hash(params);
    let mut cells = Vec::new();
    for &subset in subset_sizes {
        let cell_seed = substream(seed, &[hash_str(&variant.slug()), subset as u64, pool_index as u64]);
        let trials_out = evaluate_control(
            params, norm, &pool, subset, &env, trials, cem, EVAL_LEN, cell_seed, parallel,
        )?;
        cells.push(CellResult {
            variant: variant.slug(),
            evidence_source: source.slug().to_string(),
            subset,
            pool: pool_index,
            condition_seed: substream(cell_seed, &[TAG_CONDITION_SEED]),
            trials: trials_out,
        });
    }
    assert_eq!(params_hash(params), hash_before, "transfer must not retrain");
    Ok(cells)
}

/// Writes one cell under
/// `<root>/<experiment>/<variant>-<source>/<subset>/trial_<k>.json`.
pub fn write_cell(root: &Path, experiment: &str, cell: &CellResult) -> Result<()> {
    let dir = root
        .join(experiment)
        .join(format!("{}-{}", cell.variant, cell.evidence_source))
        .join(cell.subset.to_string());
    fs::create_dir_all(&dir)?;
    for t in &cell.trials {
        let path = dir.join(format!("trial_{}_pool_{}.json", t.trial, cell.pool));
        fs::write(&path, serde_json::to_string_pretty(t)?)?;
    }
    Ok(())
}

/// Aggregated CSV over cells: one row per (variant, source, subset, pool).
pub fn write_summary_csv(root: &Path, experiment: &str, cells: &[CellResult]) -> Result<()> {
    let dir = root.join(experiment);
    fs::create_dir_all(&dir)?;
    let mut csv = String::from(
        "variant,evidence_source,subset,pool,trials,mean_reward,min_reward,max_reward,success_rate\n",
    );
    for c in cells {
        let rewards: Vec<f64> = c.trials.iter().map(|t| t.cumulative_reward).collect();
        let min = rewards.iter().copied().fold(f64::INFINITY, f64::min);
        let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.variant,
            c.evidence_source,
            c.subset,
            c.pool,
            c.trials.len(),
            c.mean_reward(),
            min,
            max,
            c.success_rate()
        ));
    }
    fs::write(dir.join("summary.csv"), csv)?;
    Ok(())
}

/// Latent-space export: one row per encoded observation with its true state,
/// optionally followed by an MPC trajectory's latents (flag column 1).
/// Latents are normalized mean encodings, the planner's coordinate system.
pub fn export_latents(
    params: &DlgpdParams,
    norm: &NormStats,
    rollouts: &[Rollout],
    trajectory: Option<&Trajectory>,
) -> Result<String> {
    let d = params.latent_dim();
    let with_flag = trajectory.is_some();
    let mut out = String::new();
    out.push_str("s1\ts2\ts3\ttheta\ttheta_dot");
    if with_flag {
        out.push_str("\ttraj_flag");
    }
    out.push('\n');
    let item = params.encoder.spec.in_channels
        * params.encoder.spec.in_size
        * params.encoder.spec.in_size;
    for ro in rollouts {
        let states = ro
            .true_states
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("latent export needs true states".into()))?;
        let count = ro.num_observations();
        let mut rows = Vec::with_capacity(count * item);
        for t in 0..count {
            rows.extend(ro.observation(t).to_f64());
        }
        let lgs = encode_batch(&params.encoder, &rows, count);
        for (t, lg) in lgs.iter().enumerate() {
            let sn = norm.apply(&lg.mean);
            // observation o_{t+1} = (i_t, i_{t+1}) describes state t+1
            let st = &states[t + 1];
            for (i, v) in sn.iter().enumerate() {
                if i > 0 {
                    out.push('\t');
                }
                out.push_str(&format!("{v}"));
            }
            out.push_str(&format!("\t{}\t{}", st.theta, st.theta_dot));
            if with_flag {
                out.push_str("\t0");
            }
            out.push('\n');
        }
        let _ = d;
    }
    if let Some(traj) = trajectory {
        for (latent, st) in traj.latents.iter().zip(traj.true_states.iter()) {
            for (i, v) in latent.iter().enumerate() {
                if i > 0 {
                    out.push('\t');
                }
                out.push_str(&format!("{v}"));
            }
            out.push_str(&format!("\t{}\t{}\t1\n", st.theta, st.theta_dot));
        }
    }
    Ok(out)
}

/// Mean per-pixel binary cross-entropy of reconstructions from mean encodings
/// over every observation of the given rollouts (lower is better).
pub fn eval_reconstruction_bce(
    params: &DlgpdParams,
    rollouts: &[Rollout],
    parallel: bool,
) -> Result<f64> {
    use crate::tape::{Tape, bernoulli_loglik_value};
    let spec = &params.encoder.spec;
    let item = spec.in_channels * spec.in_size * spec.in_size;
    let obs_index: Vec<(usize, usize)> = rollouts
        .iter()
        .enumerate()
        .flat_map(|(r, ro)| (0..ro.num_observations()).map(move |t| (r, t)))
        .collect();
    let total = obs_index.len();
    if total == 0 {
        return Err(Error::InvalidArgument("no observations".into()));
    }
    const CHUNK: usize = 32;
    let work = |range: std::ops::Range<usize>| -> f64 {
        let count = range.len();
        let mut rows = Vec::with_capacity(count * item);
        for &(r, t) in &obs_index[range] {
            rows.extend(rollouts[r].observation(t).to_f64());
        }
        let lgs = encode_batch(&params.encoder, &rows, count);
        let mut means = Vec::with_capacity(count * spec.latent_dim);
        for lg in &lgs {
            means.extend_from_slice(&lg.mean);
        }
        let mut tape = Tape::new();
        let dvars = params.decoder.bind(&mut tape);
        let sv = tape.leaf(crate::tensor::Tensor::from_vec(
            &[count, spec.latent_dim],
            means,
        ));
        let dec = crate::nets::decode_on_tape(&mut tape, &params.decoder.spec, &dvars, sv);
        -bernoulli_loglik_value(&rows, tape.value(dec).data())
    };
    let ranges: Vec<std::ops::Range<usize>> = (0..total)
        .step_by(CHUNK)
        .map(|s| s..(s + CHUNK).min(total))
        .collect();
    let partials: Vec<f64> = if parallel {
        use rayon::prelude::*;
        ranges.into_par_iter().map(work).collect()
    } else {
        ranges.into_iter().map(work).collect()
    };
    Ok(partials.iter().sum::<f64>() / (total * item) as f64)
}

/// One-step latent prediction error on held-out transitions: RMSE of the
/// conditioned transition GP's mean against the encoded next state, versus
/// the identity baseline that predicts no state change. Uses normalized mean
/// encodings on the held-out side.
pub fn eval_transition_rmse(
    cm: &ConditionedModel,
    heldout: &[Rollout],
) -> Result<(f64, f64)> {
    let d = cm.latent_dim();
    let mut sq_gp = 0.0;
    let mut sq_id = 0.0;
    let mut count = 0usize;
    for ro in heldout {
        let nobs = ro.num_observations();
        let encoded: Vec<Vec<f64>> = (0..nobs)
            .map(|t| cm.encode_mean(&ro.observation(t)))
            .collect::<Result<_>>()?;
        for k in 0..ro.len() {
            let s = &encoded[k];
            let sp = &encoded[k + 1];
            let (pred, _) = cm.predict_next(s, ro.actions[k])?;
            for j in 0..d {
                let e_gp = pred[j] - sp[j];
                let e_id = s[j] - sp[j];
                sq_gp += e_gp * e_gp;
                sq_id += e_id * e_id;
            }
            count += d;
        }
    }
    Ok(((sq_gp / count as f64).sqrt(), (sq_id / count as f64).sqrt()))
}
