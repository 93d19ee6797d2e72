//! Run orchestration: suite loading, learner construction, the training
//! loop with periodic evaluation, metrics, and checkpoints.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use autograd::NamedArray;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, Variant};
use crate::envs::{self, Split, Suite, Task, ACTION_DIM};
use crate::eval::{evaluate, ControlMode, Controller, EvalReport};
use crate::lang::{self, EmbeddingTable, OovPolicy};
use crate::learner::{Learner, LearnerError};
use crate::metrics::{MetricsWriter, BASE_COLUMNS};
use crate::policy::{PolicyConfig, PolicyParams};
use crate::popart::TaskStats;
use crate::protocol::EpisodeConfig;
use crate::seeding;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Lang(#[from] lang::LangError),
    #[error(transparent)]
    Suite(#[from] envs::SuiteError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    CheckpointFile(#[from] autograd::CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Assemble the suite: task specs joined with their instruction sets.
pub fn load_suite(cfg: &RunConfig) -> Result<Suite, TrainError> {
    let oov = if cfg.lang.oov_zero {
        OovPolicy::Zero
    } else {
        OovPolicy::HashedRandom {
            seed: cfg.lang.oov_seed,
        }
    };
    let table = EmbeddingTable::load(&cfg.embeddings_path, cfg.lang.embed_dim, oov)?;
    let instructions = lang::load_instructions(&cfg.instructions_path, &table)?;
    let specs = envs::load_task_specs(&cfg.suite_path)?;
    let mut tasks = Vec::with_capacity(specs.len());
    for spec in specs {
        let set = instructions
            .get(&spec.name)
            .ok_or_else(|| lang::LangError::UnknownTask(spec.name.clone()))?
            .clone();
        tasks.push(Task {
            spec,
            instructions: set,
        });
    }
    let train = tasks
        .iter()
        .enumerate()
        .filter(|(_, t)| t.spec.split == Split::Train)
        .map(|(i, _)| i)
        .collect::<Vec<_>>();
    let test = tasks
        .iter()
        .enumerate()
        .filter(|(_, t)| t.spec.split == Split::Test)
        .map(|(i, _)| i)
        .collect::<Vec<_>>();
    if train.is_empty() {
        return Err(envs::SuiteError::NoTrainTasks.into());
    }
    Ok(Suite { tasks, train, test })
}

pub fn episode_config(cfg: &RunConfig) -> EpisodeConfig {
    EpisodeConfig::new(
        cfg.protocol.max_trials,
        cfg.protocol.action_repeat,
        cfg.lang.embed_dim,
        cfg.variant,
    )
}

/// Build the policy for a run. The attention window must cover the
/// longest possible episode so the first instruction stays visible at
/// the last step.
pub fn build_policy(
    cfg: &RunConfig,
    suite: &Suite,
    episode_cfg: &EpisodeConfig,
) -> Result<PolicyParams, TrainError> {
    let needed = episode_cfg.max_episode_len(suite);
    let memory_length = cfg.policy.memory_length.unwrap_or(needed);
    if memory_length < needed {
        return Err(ConfigError::Field {
            section: "policy".into(),
            key: "memory_length".into(),
            message: format!("{memory_length} is below the episode bound {needed}"),
        }
        .into());
    }
    let policy_cfg = PolicyConfig {
        layers: cfg.policy.layers,
        width: cfg.policy.width,
        heads: cfg.policy.heads,
        mlp_hidden: cfg.policy.mlp_hidden,
        memory_length,
        obs_width: episode_cfg.obs_width(),
        action_dim: ACTION_DIM,
    };
    let train_names: Vec<String> = suite
        .train
        .iter()
        .map(|&i| suite.tasks[i].spec.name.clone())
        .collect();
    let mut rng = seeding::stream(cfg.seed, "init", 0);
    Ok(PolicyParams::new(policy_cfg, &train_names, &mut rng))
}

pub fn build_learner(cfg: &RunConfig, suite: Arc<Suite>) -> Result<Learner, TrainError> {
    let episode_cfg = episode_config(cfg);
    let params = build_policy(cfg, &suite, &episode_cfg)?;
    Ok(Learner::new(
        cfg.learner.clone(),
        &cfg.popart,
        episode_cfg,
        suite,
        params,
        cfg.variant,
        cfg.seed,
        cfg.workers,
    ))
}

/// Serialize the full learner state as named arrays plus a text manifest
/// (task roster, counters, variant).
pub fn save_checkpoint(learner: &Learner, cfg: &RunConfig, path: &Path) -> Result<(), TrainError> {
    let mut meta: Vec<(String, String)> = vec![
        ("seed".into(), cfg.seed.to_string()),
        ("variant".into(), cfg.variant.name().to_string()),
        ("iterations".into(), learner.iterations.to_string()),
        ("observed_steps".into(), learner.observed_steps.to_string()),
        ("env_steps".into(), learner.env_steps.to_string()),
        ("episodes".into(), learner.episode_counter.to_string()),
    ];
    for task in &learner.suite.tasks {
        let split = match task.spec.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        meta.push(("task".into(), format!("{} {split}", task.spec.name)));
    }
    let mut arrays = Vec::new();
    for (i, name) in learner.params.store.names.iter().enumerate() {
        arrays.push(NamedArray::new(
            name.clone(),
            learner.params.store.shapes[i].clone(),
            learner.params.store.values[i].clone(),
        ));
    }
    if cfg.variant != Variant::NoPopArt {
        for (i, task) in learner.suite.tasks.iter().enumerate() {
            let s = learner.popart.task(i);
            arrays.push(NamedArray::new(
                format!("popart.{}", task.spec.name),
                vec![3],
                vec![s.mu, s.nu, s.sigma],
            ));
        }
    }
    arrays.push(NamedArray::new(
        "duals",
        vec![3],
        vec![
            learner.duals.log_eta,
            learner.duals.log_alpha_mu,
            learner.duals.log_alpha_sigma,
        ],
    ));
    autograd::save_checkpoint(path, &meta, &arrays)?;
    Ok(())
}

/// Load parameters, statistics, duals, and counters into a freshly built
/// learner. The suite roster must match the checkpoint manifest.
pub fn restore_checkpoint(learner: &mut Learner, path: &Path) -> Result<(), TrainError> {
    let (meta, arrays) = autograd::load_checkpoint(path)?;
    let get_meta = |k: &str| {
        meta.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.clone())
    };
    let roster: Vec<String> = meta
        .iter()
        .filter(|(k, _)| k == "task")
        .map(|(_, v)| v.clone())
        .collect();
    for task in &learner.suite.tasks {
        let split = match task.spec.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let line = format!("{} {split}", task.spec.name);
        if !roster.contains(&line) {
            return Err(TrainError::Checkpoint(format!(
                "task {} missing from checkpoint manifest",
                task.spec.name
            )));
        }
    }
    let mut by_name: std::collections::HashMap<&str, &NamedArray> =
        arrays.iter().map(|a| (a.name.as_str(), a)).collect();
    for (i, name) in learner.params.store.names.iter().enumerate() {
        let a = by_name.remove(name.as_str()).ok_or_else(|| {
            TrainError::Checkpoint(format!("parameter {name} missing from checkpoint"))
        })?;
        if a.data.len() != learner.params.store.values[i].len() {
            return Err(TrainError::Checkpoint(format!(
                "parameter {name}: expected {} values, found {}",
                learner.params.store.values[i].len(),
                a.data.len()
            )));
        }
        learner.params.store.values[i] = a.data.clone();
    }
    for (i, task) in learner.suite.tasks.clone().iter().enumerate() {
        if let Some(a) = by_name.remove(format!("popart.{}", task.spec.name).as_str()) {
            learner.popart.set_task(
                i,
                TaskStats {
                    mu: a.data[0],
                    nu: a.data[1],
                    sigma: a.data[2],
                },
            );
        }
    }
    if let Some(d) = by_name.remove("duals") {
        learner.duals.log_eta = d.data[0];
        learner.duals.log_alpha_mu = d.data[1];
        learner.duals.log_alpha_sigma = d.data[2];
    }
    let parse = |s: Option<String>| s.and_then(|v| v.parse::<u64>().ok()).unwrap_or(0);
    learner.iterations = parse(get_meta("iterations"));
    learner.observed_steps = parse(get_meta("observed_steps"));
    learner.env_steps = parse(get_meta("env_steps"));
    learner.episode_counter = parse(get_meta("episodes"));
    learner.refresh_snapshot();
    Ok(())
}

pub struct TrainOutcome {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub final_train: EvalReport,
    pub final_test: EvalReport,
    pub observed_steps: u64,
    pub env_steps: u64,
}

/// Run training to the configured step budget: collect/update iterations
/// with periodic deterministic evaluation, a metrics row and checkpoint
/// per evaluation, and a final checkpoint.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let manifest_path = cfg.out_dir.join("config.txt");
    std::fs::write(&manifest_path, cfg.manifest()).map_err(io_err(&manifest_path))?;

    let suite = Arc::new(load_suite(cfg)?);
    let mut learner = build_learner(cfg, suite.clone())?;
    if let Some(path) = resume {
        restore_checkpoint(&mut learner, path)?;
    }

    let task_names: Vec<String> = suite.tasks.iter().map(|t| t.spec.name.clone()).collect();
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let mut metrics = MetricsWriter::create(&metrics_path, &task_names)?;
    let checkpoint_path = cfg.out_dir.join("checkpoint.bin");

    let mut next_eval = (learner.observed_steps / cfg.eval_interval + 1) * cfg.eval_interval;
    let mut recent_train_means: Vec<f64> = Vec::new();
    let mut last_train = EvalReport::default();
    let mut last_test = EvalReport::default();

    while learner.observed_steps < cfg.total_steps {
        let m = match learner.iteration() {
            Ok(m) => m,
            Err(e) => {
                let diag_path = cfg.out_dir.join("diagnostics.txt");
                let _ = std::fs::write(&diag_path, format!("{e}"));
                return Err(e.into());
            }
        };

        if learner.observed_steps >= next_eval || learner.observed_steps >= cfg.total_steps {
            next_eval += cfg.eval_interval;
            let (train_report, test_report) = run_eval(cfg, &learner, suite.clone());
            recent_train_means.push(train_report.mean_trial_success());
            let window = &recent_train_means[recent_train_means.len().saturating_sub(5)..];
            let avg5 = window.iter().sum::<f64>() / window.len() as f64;

            let mut row = vec![
                m.iteration as f64,
                m.observed_steps as f64,
                m.env_steps as f64,
                m.mean_return,
                m.loss,
                m.loss_policy,
                m.loss_value,
                m.loss_eta,
                m.loss_alpha,
                m.eta,
                m.alpha_mu,
                m.alpha_sigma,
                m.kl,
                m.collected_trial_success,
                train_report.mean_trial_success(),
                test_report.mean_trial_success(),
                avg5,
            ];
            debug_assert_eq!(row.len(), BASE_COLUMNS.len());
            for task in &task_names {
                let rate = train_report
                    .per_task
                    .iter()
                    .chain(test_report.per_task.iter())
                    .find(|t| &t.task == task)
                    .map(|t| t.trial_success_rate())
                    .unwrap_or(f64::NAN);
                row.push(rate);
            }
            metrics.write_row(&row)?;
            metrics.flush()?;
            save_checkpoint(&learner, cfg, &checkpoint_path)?;
            last_train = train_report;
            last_test = test_report;
        }
    }

    save_checkpoint(&learner, cfg, &checkpoint_path)?;
    metrics.flush()?;
    Ok(TrainOutcome {
        metrics_path,
        checkpoint_path,
        final_train: last_train,
        final_test: last_test,
        observed_steps: learner.observed_steps,
        env_steps: learner.env_steps,
    })
}

fn run_eval(cfg: &RunConfig, learner: &Learner, suite: Arc<Suite>) -> (EvalReport, EvalReport) {
    let controller = Controller::Policy(Arc::new(learner.params.snapshot()));
    let episode_cfg = episode_config(cfg);
    let eval_seed = seeding::mix(cfg.seed, learner.iterations);
    let (train_report, _) = evaluate(
        &controller,
        suite.clone(),
        Split::Train,
        cfg.eval_episodes,
        &episode_cfg,
        ControlMode::Deterministic,
        eval_seed,
        false,
    );
    let (test_report, _) = if suite.test.is_empty() {
        (EvalReport::default(), Vec::new())
    } else {
        evaluate(
            &controller,
            suite,
            Split::Test,
            cfg.eval_episodes,
            &episode_cfg,
            ControlMode::Deterministic,
            eval_seed,
            false,
        )
    };
    (train_report, test_report)
}
