//! Policy evaluation: per-task trial success rates over a batch of
//! episodes, with stochastic and deterministic (mean-action) control.

use std::sync::Arc;

use crate::config::Variant;
use crate::envs::{Split, Suite};
use crate::policy::{NetActor, PolicySnapshot};
use crate::protocol::{run_episode, Actor, EpisodeConfig, ScriptedActor, Trajectory};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    Stochastic,
    Deterministic,
}

/// What drives evaluation episodes: a trained policy snapshot or the
/// hand-coded oracle (for pipeline sanity checks).
#[derive(Clone)]
pub enum Controller {
    Policy(Arc<PolicySnapshot>),
    Scripted,
}

#[derive(Debug, Clone)]
pub struct TaskEval {
    pub task: String,
    pub split: Split,
    pub episodes: usize,
    pub trials: usize,
    pub trial_successes: usize,
    /// Episodes where at least one trial succeeded.
    pub solved_episodes: usize,
}

impl TaskEval {
    pub fn trial_success_rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.trial_successes as f64 / self.trials as f64
        }
    }

    pub fn solved_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.solved_episodes as f64 / self.episodes as f64
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub per_task: Vec<TaskEval>,
}

impl EvalReport {
    pub fn mean_trial_success(&self) -> f64 {
        if self.per_task.is_empty() {
            return 0.0;
        }
        self.per_task
            .iter()
            .map(|t| t.trial_success_rate())
            .sum::<f64>()
            / self.per_task.len() as f64
    }
}

/// Evaluate every task of `split` over `episodes_per_task` episodes.
/// Episode streams are keyed by (seed, task, episode), so results do not
/// depend on scheduling. Returns the report and, when `keep_trajectories`
/// is set, every evaluation episode for dumping.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    controller: &Controller,
    suite: Arc<Suite>,
    split: Split,
    episodes_per_task: usize,
    episode_cfg: &EpisodeConfig,
    mode: ControlMode,
    master_seed: u64,
    keep_trajectories: bool,
) -> (EvalReport, Vec<Trajectory>) {
    let mut report = EvalReport::default();
    let mut kept = Vec::new();
    for &task_index in suite.split_indices(split) {
        let spec = &suite.tasks[task_index].spec;
        let mut te = TaskEval {
            task: spec.name.clone(),
            split: spec.split,
            episodes: 0,
            trials: 0,
            trial_successes: 0,
            solved_episodes: 0,
        };
        for e in 0..episodes_per_task {
            let rng = seeding::stream(
                master_seed,
                "eval",
                seeding::mix(task_index as u64, e as u64),
            );
            let mut actor: Box<dyn Actor> = match controller {
                Controller::Policy(snap) => Box::new(NetActor::new(
                    snap.clone(),
                    mode == ControlMode::Deterministic,
                )),
                Controller::Scripted => Box::new(ScriptedActor),
            };
            let traj = run_episode(
                suite.clone(),
                task_index,
                episode_cfg.clone(),
                actor.as_mut(),
                rng,
                (task_index * episodes_per_task + e) as u64,
            );
            te.episodes += 1;
            te.trials += traj.trial_results.len();
            te.trial_successes += traj.trial_results.iter().filter(|s| **s).count();
            if traj.trial_results.iter().any(|s| *s) {
                te.solved_episodes += 1;
            }
            if keep_trajectories {
                kept.push(traj);
            }
        }
        report.per_task.push(te);
    }
    (report, kept)
}

/// Episode configuration for evaluation matches training, including the
/// ablation variant (a no-instructions policy must be evaluated without
/// instruction phases).
pub fn eval_episode_cfg(base: &EpisodeConfig, variant: Variant) -> EpisodeConfig {
    let mut cfg = base.clone();
    cfg.variant = variant;
    cfg
}
