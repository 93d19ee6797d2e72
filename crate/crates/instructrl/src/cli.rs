//! Command-line entry points: train, eval, ablate, plot.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::config::{RunConfig, Variant};
use crate::envs::Split;
use crate::eval::{evaluate, ControlMode, Controller};
use crate::metrics::read_metrics;
use crate::plot::render_curves;
use crate::seeding;
use crate::train::{build_learner, episode_config, load_suite, restore_checkpoint, train};

#[derive(Parser)]
#[command(
    name = "instructrl",
    about = "Instruction-conditioned meta-RL on a desk-scale 2D manipulation suite"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Train a policy to the configured step budget.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the rollout worker count.
        #[arg(long)]
        workers: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: per-task trial success rates.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config (paths and hyperparameters of the run).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        episodes: usize,
        /// Use mean actions instead of sampling.
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Write per-task results as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dump evaluation trajectories to this file.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Drive episodes with the hand-coded oracle instead of the
        /// checkpoint policy (pipeline sanity check).
        #[arg(long)]
        scripted: bool,
    },
    /// Train an ablation variant.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// One of: no-popart, no-instructions, full-episode-time.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render success-rate curves from one or more metrics files.
    Plot {
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
        /// Aggregate column to plot.
        #[arg(long, default_value = "eval_mean_train")]
        series: String,
        /// Metrics CSV files (several files shade one standard deviation
        /// across them).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Outcome classes for process exit codes: usage errors exit 2, runtime
/// failures exit 1.
pub enum CliOutcome {
    Ok,
    Usage(String),
    Failure(String),
}

pub fn run(cli: Cli) -> CliOutcome {
    match dispatch(cli) {
        Ok(()) => CliOutcome::Ok,
        Err(CliError::Usage(m)) => CliOutcome::Usage(m),
        Err(CliError::Failure(m)) => CliOutcome::Failure(m),
    }
}

enum CliError {
    Usage(String),
    Failure(String),
}

impl From<crate::config::ConfigError> for CliError {
    fn from(e: crate::config::ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<crate::train::TrainError> for CliError {
    fn from(e: crate::train::TrainError) -> Self {
        match e {
            crate::train::TrainError::Config(c) => CliError::Usage(c.to_string()),
            other => CliError::Failure(other.to_string()),
        }
    }
}

fn apply_overrides(
    cfg: &mut RunConfig,
    seed: Option<u64>,
    workers: Option<usize>,
    out: Option<PathBuf>,
) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(w) = workers {
        cfg.workers = w.max(1);
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train {
            config,
            seed,
            workers,
            out,
            checkpoint,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            apply_overrides(&mut cfg, seed, workers, out);
            let outcome = train(&cfg, checkpoint.as_deref())?;
            println!(
                "done: {} observed steps ({} env steps)",
                outcome.observed_steps, outcome.env_steps
            );
            println!("metrics: {}", outcome.metrics_path.display());
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            println!(
                "final train success {:.3}, test success {:.3}",
                outcome.final_train.mean_trial_success(),
                outcome.final_test.mean_trial_success()
            );
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            config,
            split,
            episodes,
            deterministic,
            seed,
            out,
            dump,
            scripted,
        } => cmd_eval(
            &checkpoint,
            &config,
            &split,
            episodes,
            deterministic,
            seed,
            out.as_deref(),
            dump.as_deref(),
            scripted,
        ),
        Cmd::Ablate {
            config,
            variant,
            seed,
            workers,
            out,
        } => {
            let Some(variant) = Variant::parse(&variant) else {
                return Err(CliError::Usage(format!(
                    "unknown variant {variant:?}; expected no-popart, no-instructions, or full-episode-time"
                )));
            };
            let mut cfg = RunConfig::load(&config)?;
            cfg.variant = variant;
            let out_given = out.is_some();
            apply_overrides(&mut cfg, seed, workers, out);
            if !out_given {
                cfg.out_dir = cfg.out_dir.join(variant.name());
            }
            let outcome = train(&cfg, None)?;
            println!(
                "variant {} done: train {:.3}, test {:.3}",
                variant.name(),
                outcome.final_train.mean_trial_success(),
                outcome.final_test.mean_trial_success()
            );
            Ok(())
        }
        Cmd::Plot {
            out,
            series,
            inputs,
        } => {
            let mut tables = Vec::new();
            for p in &inputs {
                tables.push(read_metrics(p).map_err(|e| CliError::Failure(e.to_string()))?);
            }
            for t in &tables {
                if t.column(&series).is_none() {
                    return Err(CliError::Usage(format!("series {series:?} not in metrics")));
                }
            }
            let svg = render_curves(&tables, &series);
            std::fs::write(&out, svg).map_err(|e| CliError::Failure(e.to_string()))?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    config: &Path,
    split: &str,
    episodes: usize,
    deterministic: bool,
    seed: Option<u64>,
    out: Option<&Path>,
    dump: Option<&Path>,
    scripted: bool,
) -> Result<(), CliError> {
    if episodes == 0 {
        return Err(CliError::Usage("episodes must be >= 1".into()));
    }
    let split = match split {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(CliError::Usage(format!("unknown split {other:?}"))),
    };
    let mut cfg = RunConfig::load(config)?;
    // The checkpoint's variant governs observation layout.
    let before_bytes =
        std::fs::read(checkpoint).map_err(|e| CliError::Failure(format!("{e}")))?;
    let checksum_before = seeding::fnv1a(&before_bytes);
    let (meta, _) =
        autograd::load_checkpoint(checkpoint).map_err(|e| CliError::Failure(e.to_string()))?;
    if let Some((_, v)) = meta.iter().find(|(k, _)| k == "variant") {
        cfg.variant = Variant::parse(v)
            .ok_or_else(|| CliError::Failure(format!("checkpoint has unknown variant {v:?}")))?;
    }

    let suite = Arc::new(load_suite(&cfg)?);
    let controller = if scripted {
        Controller::Scripted
    } else {
        let mut learner = build_learner(&cfg, suite.clone())?;
        restore_checkpoint(&mut learner, checkpoint)?;
        Controller::Policy(Arc::new(learner.params.snapshot()))
    };
    let episode_cfg = episode_config(&cfg);
    let mode = if deterministic {
        ControlMode::Deterministic
    } else {
        ControlMode::Stochastic
    };
    let (report, trajectories) = evaluate(
        &controller,
        suite,
        split,
        episodes,
        &episode_cfg,
        mode,
        seed.unwrap_or(cfg.seed),
        dump.is_some(),
    );

    println!(
        "{:<16} {:>6} {:>9} {:>7} {:>14} {:>8}",
        "task", "split", "episodes", "trials", "trial-success", "solved"
    );
    for t in &report.per_task {
        println!(
            "{:<16} {:>6} {:>9} {:>7} {:>14.3} {:>8.3}",
            t.task,
            match t.split {
                Split::Train => "train",
                Split::Test => "test",
            },
            t.episodes,
            t.trials,
            t.trial_success_rate(),
            t.solved_rate()
        );
    }
    println!("mean trial success: {:.3}", report.mean_trial_success());

    if let Some(path) = out {
        let mut csv = String::from("task,split,episodes,trials,successes,trial_success,solved\n");
        for t in &report.per_task {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                t.task,
                match t.split {
                    Split::Train => "train",
                    Split::Test => "test",
                },
                t.episodes,
                t.trials,
                t.trial_successes,
                t.trial_success_rate(),
                t.solved_rate()
            ));
        }
        std::fs::write(path, csv).map_err(|e| CliError::Failure(e.to_string()))?;
    }
    if let Some(path) = dump {
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| CliError::Failure(e.to_string()))?,
        );
        crate::protocol::write_trajectory_dump(&mut w, &trajectories)
            .map_err(|e| CliError::Failure(e.to_string()))?;
    }

    // Evaluation is read-only by construction; verify by checksum.
    let after_bytes = std::fs::read(checkpoint).map_err(|e| CliError::Failure(format!("{e}")))?;
    if seeding::fnv1a(&after_bytes) != checksum_before {
        return Err(CliError::Failure(
            "checkpoint file changed during evaluation".into(),
        ));
    }
    Ok(())
}
