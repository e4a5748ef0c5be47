//! `dlgpd` command-line driver.
//!
//! Stages of the full protocol, one subcommand each:
//! `collect` (datasets), `train`, `eval-control`, `transfer`,
//! `export-latents`, and `verify` (the property/oracle suite). Every run
//! writes its effective configuration and master seed into the output
//! directory, and reruns from that file reproduce the outputs bit for bit in
//! single-threaded mode.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dlgpd::env::{load_dataset, make_variant, PendulumParams, Variant};
use dlgpd::experiments::{
    evaluate_control, export_latents, generate_datasets, transfer_eval, write_cell,
    write_summary_csv, EvidenceSource, ExperimentConfig, EVAL_LEN,
};
use dlgpd::model::{
    compute_norm_stats, condition, load_checkpoint, save_checkpoint, TrainConfig,
};
use dlgpd::nets::{DecoderSpec, EncoderSpec};
use dlgpd::planner::{mpc_run, CemConfig};
use dlgpd::util::substream;
use dlgpd::verify;

/// Merged run configuration: a JSON file plus command-line overrides.
/// Unknown keys are rejected. The master `seed` derives every subsection
/// seed, so one number pins the whole run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    seed: u64,
    env: PendulumParams,
    experiment: ExperimentConfig,
    train: TrainConfig,
    cem: CemConfig,
    /// Worker threads for the deterministic internal parallelism
    /// (1 = fully sequential execution, the reproducibility default).
    threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            env: PendulumParams::default(),
            experiment: ExperimentConfig::default(),
            train: TrainConfig::default(),
            cem: CemConfig::default(),
            threads: 1,
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let cfg: RunConfig = serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?;
                Ok(cfg)
            }
        }
    }

    /// Applies overrides and rederives subsection seeds from the master seed.
    fn finalize(mut self, seed_override: Option<u64>, threads: Option<usize>) -> Self {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        if let Some(t) = threads {
            self.threads = t;
        }
        self.experiment.seed = self.seed;
        self.train.seed = substream(self.seed, &[1]);
        self.cem.seed = substream(self.seed, &[2]);
        let parallel = self.threads > 1;
        self.train.parallel = parallel;
        self.cem.parallel = parallel;
        self
    }

    fn parallel(&self) -> bool {
        self.threads > 1
    }

    fn write_into(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        fs::write(
            out.join("effective_config.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

#[derive(Parser)]
#[command(
    name = "dlgpd",
    about = "Deep latent Gaussian process dynamics: learn pendulum dynamics from pixels, plan swing-up, transfer by evidence swapping",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (1 = sequential, the reproducibility default).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training set and all evidence pools.
    Collect {
        #[command(flatten)]
        common: Common,
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the joint model on a collected dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training dataset directory (from `collect`, `<root>/train`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory (checkpoint, training log, config echo).
        #[arg(long)]
        out: PathBuf,
    },
    /// Condition on an evidence pool and evaluate swing-up control.
    EvalControl {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evidence pool directory.
        #[arg(long)]
        pool: PathBuf,
        /// Evidence subset size (first-k rollouts of the pool).
        #[arg(long)]
        subset: usize,
        /// Environment variant to control in.
        #[arg(long, default_value = "base")]
        variant: String,
        /// Control trials.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evidence-swap transfer study for one variant.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root (from `collect`).
        #[arg(long)]
        data: PathBuf,
        /// Variant: inverted-action, mass-0.2, mass-1.5, ...
        #[arg(long)]
        variant: String,
        /// Evidence source: matching (variant pools) or mismatching (base pools).
        #[arg(long, default_value = "matching")]
        source: String,
        /// Subset sizes; defaults to the config's sweep.
        #[arg(long)]
        subset: Vec<usize>,
        /// Evidence pool index.
        #[arg(long, default_value_t = 0)]
        pool: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export encoded latents with true states for plotting.
    ExportLatents {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Rollout dataset to encode (must carry true states).
        #[arg(long)]
        data: PathBuf,
        /// Output TSV path.
        #[arg(long)]
        out: PathBuf,
        /// Also overlay one MPC trajectory (requires --evidence).
        #[arg(long, default_value_t = false)]
        with_trajectory: bool,
        /// Evidence pool for the trajectory's conditioning.
        #[arg(long)]
        evidence: Option<PathBuf>,
        /// Evidence subset size for the trajectory.
        #[arg(long, default_value_t = 20)]
        subset: usize,
    },
    /// Run the property/oracle verification suite.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Also run the multi-hour desk-scale learning study.
        #[arg(long, default_value_t = false)]
        desk_scale: bool,
        /// Optional directory for a JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn setup_threads(threads: usize) {
    if threads > 1 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Collect { common, out } => {
            let cfg = RunConfig::load(common.config.as_deref())?
                .finalize(common.seed, common.threads);
            setup_threads(cfg.threads);
            cfg.write_into(&out)?;
            println!(
                "collecting: {} training rollouts, {} pools x {} rollouts per variant, seed {}",
                cfg.experiment.train_rollouts,
                cfg.experiment.evidence_pools,
                cfg.experiment.pool_rollouts,
                cfg.seed
            );
            generate_datasets(&out, &cfg.env, &cfg.experiment)?;
            println!("datasets written under {}", out.display());
            Ok(())
        }
        Command::Train { common, data, out } => {
            let cfg = RunConfig::load(common.config.as_deref())?
                .finalize(common.seed, common.threads);
            setup_threads(cfg.threads);
            cfg.write_into(&out)?;
            let (manifest, rollouts) = load_dataset(&data)?;
            println!(
                "training on {} rollouts ({} transitions), {} epochs, batch {}, lr {}",
                rollouts.len(),
                rollouts.iter().map(|r| r.len()).sum::<usize>(),
                cfg.train.epochs,
                cfg.train.batch_size,
                cfg.train.lr
            );
            let echo = serde_json::to_value(&cfg)?;
            let out_dir = out.clone();
            let echo_cb = echo.clone();
            let ds = rollouts.clone();
            let parallel = cfg.parallel();
            let mut checkpoint_cb =
                |epoch: usize, params: &dlgpd::model::DlgpdParams, _log: &dlgpd::model::TrainLog| {
                    let norm = compute_norm_stats(params, &ds, parallel)?;
                    let path = out_dir.join(format!("checkpoint_epoch_{epoch:05}.ckpt"));
                    save_checkpoint(&path, params, &norm, echo_cb.clone())?;
                    println!("checkpoint written: {}", path.display());
                    Ok(())
                };
            let outcome = dlgpd::model::train(
                &rollouts,
                &EncoderSpec::standard(),
                &DecoderSpec::standard(),
                &cfg.train,
                Some(&mut checkpoint_cb),
            )?;
            save_checkpoint(
                &out.join("checkpoint.ckpt"),
                &outcome.params,
                &outcome.norm_stats,
                echo,
            )?;
            let mut csv = String::from(
                "epoch,loss,elbo,recon,entropy,transition,reward,snr,prior\n",
            );
            for e in &outcome.log {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    e.epoch, e.loss, e.elbo, e.recon, e.entropy, e.transition, e.reward, e.snr,
                    e.prior
                ));
            }
            fs::write(out.join("training_log.csv"), csv)?;
            println!(
                "trained on variant '{}'; checkpoint at {}",
                manifest.variant,
                out.join("checkpoint.ckpt").display()
            );
            Ok(())
        }
        Command::EvalControl {
            common,
            checkpoint,
            pool,
            subset,
            variant,
            trials,
            out,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?
                .finalize(common.seed, common.threads);
            setup_threads(cfg.threads);
            cfg.write_into(&out)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let (_, pool_rollouts) = load_dataset(&pool)?;
            let v = Variant::parse(&variant)?;
            let env = make_variant(&cfg.env, v)?;
            let trials = trials.unwrap_or(cfg.experiment.control_trials);
            println!(
                "control eval: variant {}, subset {subset} of pool ({} rollouts), {trials} trials",
                v.slug(),
                pool_rollouts.len()
            );
            let results = evaluate_control(
                &ckpt.params,
                &ckpt.norm_stats,
                &pool_rollouts,
                subset,
                &env,
                trials,
                &cfg.cem,
                cfg.experiment.eval_len,
                cfg.seed,
                cfg.parallel(),
            )?;
            let cell = dlgpd::experiments::CellResult {
                variant: v.slug(),
                evidence_source: "matching".into(),
                subset,
                pool: 0,
                condition_seed: cfg.seed,
                trials: results,
            };
            for t in &cell.trials {
                println!(
                    "trial {}: cumulative reward {:.1}, success {}",
                    t.trial, t.cumulative_reward, t.success
                );
            }
            println!(
                "mean reward {:.1}, success rate {:.2}",
                cell.mean_reward(),
                cell.success_rate()
            );
            write_cell(&out, "control", &cell)?;
            write_summary_csv(&out, "control", &[cell])?;
            Ok(())
        }
        Command::Transfer {
            common,
            checkpoint,
            data,
            variant,
            source,
            subset,
            pool,
            out,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?
                .finalize(common.seed, common.threads);
            setup_threads(cfg.threads);
            cfg.write_into(&out)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let v = Variant::parse(&variant)?;
            let source = match source.as_str() {
                "matching" => EvidenceSource::Matching,
                "mismatching" => EvidenceSource::Mismatching,
                other => bail!("unknown evidence source '{other}' (matching|mismatching)"),
            };
            let subsets = if subset.is_empty() {
                cfg.experiment.subset_sizes.clone()
            } else {
                subset
            };
            println!(
                "transfer: variant {}, {} evidence, subsets {:?}, pool {}",
                v.slug(),
                source.slug(),
                subsets,
                pool
            );
            let cells = transfer_eval(
                &ckpt.params,
                &ckpt.norm_stats,
                &data,
                v,
                source,
                &subsets,
                pool,
                &cfg.cem,
                cfg.experiment.control_trials,
                cfg.seed,
                cfg.parallel(),
            )?;
            for c in &cells {
                println!(
                    "subset {}: mean reward {:.1}, success rate {:.2}",
                    c.subset,
                    c.mean_reward(),
                    c.success_rate()
                );
                write_cell(&out, "transfer", c)?;
            }
            write_summary_csv(&out, "transfer", &cells)?;
            Ok(())
        }
        Command::ExportLatents {
            common,
            checkpoint,
            data,
            out,
            with_trajectory,
            evidence,
            subset,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?
                .finalize(common.seed, common.threads);
            setup_threads(cfg.threads);
            let ckpt = load_checkpoint(&checkpoint)?;
            let (_, rollouts) = load_dataset(&data)?;
            let trajectory = if with_trajectory {
                let pool_dir = evidence
                    .ok_or_else(|| anyhow::anyhow!("--with-trajectory requires --evidence"))?;
                let (_, pool) = load_dataset(&pool_dir)?;
                if subset == 0 || subset > pool.len() {
                    bail!("--subset must be in 1..={}", pool.len());
                }
                let cm = condition(
                    &ckpt.params,
                    &ckpt.norm_stats,
                    &pool[..subset],
                    cfg.seed,
                    cfg.parallel(),
                )?;
                let mut rng = dlgpd::util::stream(cfg.seed, &[99]);
                let init = dlgpd::env::InitDistribution::hanging_down().sample(&mut rng);
                println!("running one MPC episode for the overlay...");
                Some(mpc_run(&cfg.env, init, &cm, &cfg.cem, EVAL_LEN, cfg.seed)?)
            } else {
                None
            };
            let tsv = export_latents(&ckpt.params, &ckpt.norm_stats, &rollouts, trajectory.as_ref())?;
            if let Some(dir) = out.parent() {
                if !dir.as_os_str().is_empty() {
                    fs::create_dir_all(dir)?;
                }
            }
            fs::write(&out, tsv)?;
            println!("latent export written to {}", out.display());
            Ok(())
        }
        Command::Verify {
            common,
            desk_scale,
            out,
        } => {
            let cfg = RunConfig::load(common.config.as_deref())?
                .finalize(common.seed, common.threads);
            setup_threads(cfg.threads);
            let mut checks = verify::run_fast_checks(cfg.seed, cfg.parallel());
            if desk_scale {
                println!("running the desk-scale learning study (this takes a while)...");
                let desk = verify::check_desk_scale(&verify::DeskScaleConfig {
                    seed: cfg.seed,
                    parallel: cfg.parallel(),
                    ..verify::DeskScaleConfig::default()
                })?;
                desk.print();
                checks.push(desk);
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                let report: Vec<serde_json::Value> = checks
                    .iter()
                    .map(|c| {
                        serde_json::json!({
                            "name": c.name,
                            "pass": c.pass,
                            "details": c.details,
                            "seconds": c.seconds,
                            "digest": format!("{:016x}", c.digest),
                        })
                    })
                    .collect();
                fs::write(
                    dir.join("verify_report.json"),
                    serde_json::to_string_pretty(&report)?,
                )?;
            }
            let failed: Vec<&str> = checks
                .iter()
                .filter(|c| !c.pass)
                .map(|c| c.name.as_str())
                .collect();
            if failed.is_empty() {
                println!("all checks passed");
                Ok(())
            } else {
                bail!("failed checks: {}", failed.join(", "))
            }
        }
    }
}
