//! Episode orchestration: the instruction-phase/trial-phase state machine
//! and unified observation assembly.
//!
//! An episode opens with an instruction phase (one embedded word per
//! step, actions and rewards ignored), then runs trial phases against the
//! environment with action repeat. A successful trial rolls straight into
//! the next trial; a failed one inserts a fresh instruction phase first.
//! The episode ends after `max_trials` trials. Observations keep one
//! fixed layout across phases: `[state | word | time]`, zeroing whichever
//! part is inactive.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::Variant;
use crate::envs::{Env, EnvState, Suite, TaskSpec, ACTION_DIM, STATE_DIM};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("step on a finished episode")]
    EpisodeDone,
    #[error("trajectory dump line {line}: {message}")]
    Dump { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Instruction,
    Trial,
    Done,
}

/// Phase a consumed step belonged to; trials carry their 0-based index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseTag {
    Instruction,
    Trial(usize),
}

#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub max_trials: usize,
    pub action_repeat: usize,
    pub state_dim: usize,
    pub embed_dim: usize,
    pub variant: Variant,
}

impl EpisodeConfig {
    pub fn new(max_trials: usize, action_repeat: usize, embed_dim: usize, variant: Variant) -> Self {
        assert!(max_trials >= 1 && action_repeat >= 1);
        EpisodeConfig {
            max_trials,
            action_repeat,
            state_dim: STATE_DIM,
            embed_dim,
            variant,
        }
    }

    /// Constant observation width across phases.
    pub fn obs_width(&self) -> usize {
        match self.variant {
            // [state | previous reward | time]
            Variant::NoInstructions => self.state_dim + 2,
            // [state | word embedding | time]
            _ => self.state_dim + self.embed_dim + 1,
        }
    }

    /// Upper bound on observed steps in one episode of `task`.
    pub fn max_episode_len(&self, suite: &Suite) -> usize {
        let instr = if self.variant == Variant::NoInstructions {
            0
        } else {
            suite.max_instruction_len()
        };
        self.max_trials * (suite.max_steps_per_trial() + instr)
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reward: f64,
    /// False for instruction steps: the learner must take zero return
    /// contribution from them.
    pub learnable: bool,
    pub phase: PhaseTag,
    /// Success metric fired during this step.
    pub success: bool,
    /// Inner environment steps consumed (0 for instruction steps, up to
    /// `action_repeat` for trial steps; fewer if success ends the trial
    /// mid-repeat).
    pub inner_steps: usize,
    pub done: bool,
}

/// One live episode.
pub struct Episode {
    pub cfg: EpisodeConfig,
    pub suite: Arc<Suite>,
    pub task_index: usize,
    env: Env,
    rng: ChaCha8Rng,
    phase: Phase,
    step_in_phase: usize,
    trials_started: usize,
    current_instruction: Vec<Vec<f64>>,
    /// Per-trial success outcomes, filled as trials finish.
    pub trial_results: Vec<bool>,
    total_trial_steps: usize,
    pub inner_env_steps: usize,
    prev_reward: f64,
    pub last_trial_succeeded: bool,
}

impl Episode {
    pub fn new(suite: Arc<Suite>, task_index: usize, cfg: EpisodeConfig, mut rng: ChaCha8Rng) -> Episode {
        let task = &suite.tasks[task_index];
        let env = Env::new(task.spec.clone(), &mut rng);
        let mut ep = Episode {
            cfg,
            suite: suite.clone(),
            task_index,
            env,
            rng,
            phase: Phase::Instruction,
            step_in_phase: 0,
            trials_started: 0,
            current_instruction: Vec::new(),
            trial_results: Vec::new(),
            total_trial_steps: 0,
            inner_env_steps: 0,
            prev_reward: 0.0,
            last_trial_succeeded: false,
        };
        if ep.cfg.variant == Variant::NoInstructions {
            ep.begin_trial();
        } else {
            ep.sample_instruction();
        }
        ep
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn trials_started(&self) -> usize {
        self.trials_started
    }

    pub fn env_state(&self) -> &EnvState {
        &self.env.state
    }

    pub fn task_spec(&self) -> &TaskSpec {
        &self.suite.tasks[self.task_index].spec
    }

    fn sample_instruction(&mut self) {
        let task = &self.suite.tasks[self.task_index];
        let (_, encoded) = task.instructions.sample(&mut self.rng);
        self.current_instruction = encoded.to_vec();
        self.phase = Phase::Instruction;
        self.step_in_phase = 0;
    }

    fn begin_trial(&mut self) {
        self.trials_started += 1;
        self.phase = Phase::Trial;
        self.step_in_phase = 0;
    }

    fn time_obs(&self) -> f64 {
        let max_steps = self.task_spec().max_steps_per_trial;
        match self.cfg.variant {
            Variant::FullEpisodeTime => {
                self.total_trial_steps as f64 / (self.cfg.max_trials * max_steps) as f64
            }
            _ => self.step_in_phase as f64 / max_steps as f64,
        }
    }

    /// Observation for the current phase; `None` once the episode is done.
    pub fn observation(&self) -> Option<Vec<f64>> {
        let mut obs = Vec::with_capacity(self.cfg.obs_width());
        match self.phase {
            Phase::Done => return None,
            Phase::Instruction => {
                obs.extend(std::iter::repeat_n(0.0, self.cfg.state_dim));
                obs.extend(&self.current_instruction[self.step_in_phase]);
                obs.push(0.0);
            }
            Phase::Trial => {
                obs.extend(self.env.state.vector());
                match self.cfg.variant {
                    Variant::NoInstructions => obs.push(self.prev_reward),
                    _ => obs.extend(std::iter::repeat_n(0.0, self.cfg.embed_dim)),
                }
                obs.push(self.time_obs());
            }
        }
        debug_assert_eq!(obs.len(), self.cfg.obs_width());
        Some(obs)
    }

    /// Advance one protocol step with `action`. Instruction steps discard
    /// the action and touch nothing; trial steps apply it `action_repeat`
    /// times (success mid-repeat ends the trial immediately).
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome, ProtocolError> {
        match self.phase {
            Phase::Done => Err(ProtocolError::EpisodeDone),
            Phase::Instruction => {
                self.step_in_phase += 1;
                if self.step_in_phase >= self.current_instruction.len() {
                    self.begin_trial();
                }
                Ok(StepOutcome {
                    reward: 0.0,
                    learnable: false,
                    phase: PhaseTag::Instruction,
                    success: false,
                    inner_steps: 0,
                    done: false,
                })
            }
            Phase::Trial => {
                let trial_idx = self.trials_started - 1;
                let max_steps = self.task_spec().max_steps_per_trial;
                let mut reward = 0.0;
                let mut success = false;
                let mut inner = 0;
                for _ in 0..self.cfg.action_repeat {
                    let (r, s) = self.env.step(action);
                    reward += r;
                    inner += 1;
                    self.inner_env_steps += 1;
                    if s {
                        success = true;
                        break;
                    }
                }
                self.step_in_phase += 1;
                self.total_trial_steps += 1;
                self.prev_reward = reward;

                let trial_over = success || self.step_in_phase >= max_steps;
                if trial_over {
                    self.trial_results.push(success);
                    self.last_trial_succeeded = success;
                    if self.trials_started >= self.cfg.max_trials {
                        self.phase = Phase::Done;
                    } else {
                        self.env.reset(&mut self.rng);
                        if success || self.cfg.variant == Variant::NoInstructions {
                            self.begin_trial();
                        } else {
                            self.sample_instruction();
                        }
                    }
                }
                Ok(StepOutcome {
                    reward,
                    learnable: true,
                    phase: PhaseTag::Trial(trial_idx),
                    success,
                    inner_steps: inner,
                    done: self.phase == Phase::Done,
                })
            }
        }
    }
}

/// What a controller returns for one observation. Behavior outputs are
/// recorded so the learner can penalize divergence from the collection
/// policy.
#[derive(Debug, Clone)]
pub struct ActorOutput {
    pub action: Vec<f64>,
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

/// Anything that can drive an episode. The environment state and spec are
/// exposed for privileged controllers (the scripted oracle); policy
/// controllers ignore them.
pub trait Actor {
    fn begin_episode(&mut self);
    fn act(
        &mut self,
        obs: &[f64],
        env_state: &EnvState,
        spec: &TaskSpec,
        rng: &mut ChaCha8Rng,
    ) -> ActorOutput;
}

/// Uniform random actions; used by conformance tests.
pub struct RandomActor;

impl Actor for RandomActor {
    fn begin_episode(&mut self) {}
    fn act(
        &mut self,
        _obs: &[f64],
        _env_state: &EnvState,
        _spec: &TaskSpec,
        rng: &mut ChaCha8Rng,
    ) -> ActorOutput {
        use rand::Rng;
        let action: Vec<f64> = (0..ACTION_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        ActorOutput {
            mean: action.clone(),
            log_std: vec![0.0; ACTION_DIM],
            action,
        }
    }
}

/// The hand-coded per-family controller behind the [`Actor`] interface.
pub struct ScriptedActor;

impl Actor for ScriptedActor {
    fn begin_episode(&mut self) {}
    fn act(
        &mut self,
        _obs: &[f64],
        env_state: &EnvState,
        spec: &TaskSpec,
        _rng: &mut ChaCha8Rng,
    ) -> ActorOutput {
        let action = crate::envs::scripted_action(spec, env_state).to_vec();
        ActorOutput {
            mean: action.clone(),
            log_std: vec![-6.0; ACTION_DIM],
            action,
        }
    }
}

/// One recorded protocol step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub learnable: bool,
    pub phase: PhaseTag,
    pub success: bool,
    pub inner_steps: usize,
    pub behavior_mean: Vec<f64>,
    pub behavior_log_std: Vec<f64>,
}

/// Ordered record of one episode.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub episode_id: u64,
    pub task_index: usize,
    pub task_name: String,
    pub steps: Vec<StepRecord>,
    pub trial_results: Vec<bool>,
    pub inner_env_steps: usize,
}

impl Trajectory {
    pub fn observed_steps(&self) -> usize {
        self.steps.len()
    }

    /// Contiguous learnable spans, one per trial: (start, end inclusive,
    /// success).
    pub fn trial_spans(&self) -> Vec<(usize, usize, bool)> {
        let mut spans: Vec<(usize, usize, bool)> = Vec::new();
        let mut current: Option<(usize, usize, usize)> = None; // (trial, start, end)
        for (i, step) in self.steps.iter().enumerate() {
            if let PhaseTag::Trial(t) = step.phase {
                match current {
                    Some((ct, _, ref mut end)) if ct == t => *end = i,
                    Some((ct, cs, ce)) => {
                        spans.push((cs, ce, self.trial_results[ct]));
                        current = Some((t, i, i));
                    }
                    None => current = Some((t, i, i)),
                }
            }
        }
        if let Some((ct, cs, ce)) = current {
            spans.push((cs, ce, *self.trial_results.get(ct).unwrap_or(&false)));
        }
        spans
    }

    pub fn total_reward(&self) -> f64 {
        self.steps
            .iter()
            .filter(|s| s.learnable)
            .map(|s| s.reward)
            .sum()
    }
}

/// Run one full episode with the given controller. The provided stream
/// is split into independent episode (instruction/reset) and action
/// streams.
pub fn run_episode(
    suite: Arc<Suite>,
    task_index: usize,
    cfg: EpisodeConfig,
    actor: &mut dyn Actor,
    mut rng: ChaCha8Rng,
    episode_id: u64,
) -> Trajectory {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let ep_seed: u64 = rng.random();
    let act_seed: u64 = rng.random();
    let mut episode = Episode::new(
        suite.clone(),
        task_index,
        cfg,
        ChaCha8Rng::seed_from_u64(ep_seed),
    );
    let mut act_rng = ChaCha8Rng::seed_from_u64(act_seed);
    actor.begin_episode();
    let mut steps = Vec::new();
    while let Some(obs) = episode.observation() {
        let out = actor.act(&obs, episode.env_state(), episode.task_spec(), &mut act_rng);
        let outcome = episode.step(&out.action).expect("episode not done");
        steps.push(StepRecord {
            obs,
            action: out.action,
            reward: outcome.reward,
            learnable: outcome.learnable,
            phase: outcome.phase,
            success: outcome.success,
            inner_steps: outcome.inner_steps,
            behavior_mean: out.mean,
            behavior_log_std: out.log_std,
        });
    }
    Trajectory {
        episode_id,
        task_index,
        task_name: suite.tasks[task_index].spec.name.clone(),
        steps,
        trial_results: episode.trial_results.clone(),
        inner_env_steps: episode.inner_env_steps,
    }
}

fn fmt_floats(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_floats(s: &str, line: usize) -> Result<Vec<f64>, ProtocolError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.parse().map_err(|_| ProtocolError::Dump {
                line,
                message: format!("bad float {t:?}"),
            })
        })
        .collect()
}

/// Write trajectories as newline-delimited records, one step per line:
/// `episode step phase task learnable success reward obs action`
/// (tab-separated; obs/action comma-joined).
pub fn write_trajectory_dump(w: &mut impl Write, trajectories: &[Trajectory]) -> std::io::Result<()> {
    for tr in trajectories {
        for (i, s) in tr.steps.iter().enumerate() {
            let phase = match s.phase {
                PhaseTag::Instruction => "instr".to_string(),
                PhaseTag::Trial(t) => format!("trial{t}"),
            };
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                tr.episode_id,
                i,
                phase,
                tr.task_name,
                s.learnable as u8,
                s.success as u8,
                s.reward,
                fmt_floats(&s.obs),
                fmt_floats(&s.action),
            )?;
        }
    }
    Ok(())
}

/// Parse a trajectory dump back into step records (behavior outputs are
/// not part of the dump and come back empty).
pub fn read_trajectory_dump(r: impl BufRead) -> Result<Vec<Trajectory>, ProtocolError> {
    let mut out: Vec<Trajectory> = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line.map_err(|e| ProtocolError::Dump {
            line: ln + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 9 {
            return Err(ProtocolError::Dump {
                line: ln + 1,
                message: format!("expected 9 fields, found {}", fields.len()),
            });
        }
        let bad = |message: String| ProtocolError::Dump {
            line: ln + 1,
            message,
        };
        let episode_id: u64 = fields[0].parse().map_err(|_| bad("bad episode id".into()))?;
        let phase = if fields[2] == "instr" {
            PhaseTag::Instruction
        } else if let Some(t) = fields[2].strip_prefix("trial") {
            PhaseTag::Trial(t.parse().map_err(|_| bad("bad trial index".into()))?)
        } else {
            return Err(bad(format!("bad phase {:?}", fields[2])));
        };
        let step = StepRecord {
            obs: parse_floats(fields[7], ln + 1)?,
            action: parse_floats(fields[8], ln + 1)?,
            reward: fields[6].parse().map_err(|_| bad("bad reward".into()))?,
            learnable: fields[4] == "1",
            phase,
            success: fields[5] == "1",
            inner_steps: 0,
            behavior_mean: Vec::new(),
            behavior_log_std: Vec::new(),
        };
        match out.last_mut() {
            Some(tr) if tr.episode_id == episode_id => tr.steps.push(step),
            _ => out.push(Trajectory {
                episode_id,
                task_index: 0,
                task_name: fields[3].to_string(),
                steps: vec![step],
                trial_results: Vec::new(),
                inner_env_steps: 0,
            }),
        }
    }
    // Reconstruct per-trial outcomes from the step-level success flags.
    for tr in &mut out {
        let mut results: Vec<bool> = Vec::new();
        for s in &tr.steps {
            if let PhaseTag::Trial(t) = s.phase {
                if results.len() <= t {
                    results.resize(t + 1, false);
                }
                if s.success {
                    results[t] = true;
                }
            }
        }
        tr.trial_results = results;
    }
    Ok(out)
}
