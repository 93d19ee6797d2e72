//! Constrained policy optimization with buffered trajectory reuse.
//!
//! Each learning step collects a batch of episodes with the frozen old
//! policy, pushes them into a FIFO buffer holding the last
//! `batch_size * t_target` trajectories, samples a fresh batch from the
//! buffer, normalizes value targets per task, and takes one joint
//! gradient step on the policy, the value heads, and the dual variables
//! (temperature and the decoupled KL penalty multipliers). The old policy
//! snapshot refreshes every `t_target` steps.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use autograd::{adam_step, AdamState, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{LearnerHyper, PopArtConfig, Variant};
use crate::envs::Suite;
use crate::policy::{NetActor, PolicyParams, PolicySnapshot};
use crate::popart::{rescale_head, PopArtStats};
use crate::protocol::{run_episode, EpisodeConfig, Trajectory};
use crate::seeding;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("non-finite loss at iteration {iteration}: {details}")]
    NonFinite { iteration: u64, details: String },
    #[error(transparent)]
    Tape(#[from] autograd::TensorError),
}

/// Bounded trajectory queue; eviction is strictly oldest-first.
pub struct FifoBuffer {
    capacity: usize,
    items: std::collections::VecDeque<Arc<Trajectory>>,
}

impl FifoBuffer {
    pub fn new(capacity: usize) -> FifoBuffer {
        assert!(capacity >= 1);
        FifoBuffer {
            capacity,
            items: std::collections::VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Arc<Trajectory>) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn oldest_episode_id(&self) -> Option<u64> {
        self.items.front().map(|t| t.episode_id)
    }

    /// Sample `n` distinct trajectories (all of them if fewer are stored).
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Arc<Trajectory>> {
        let len = self.items.len();
        if len <= n {
            return self.items.iter().cloned().collect();
        }
        let idx = rand::seq::index::sample(rng, len, n);
        idx.iter().map(|i| self.items[i].clone()).collect()
    }
}

/// Per-step return target and advantage for one trajectory, raw and
/// normalized. Indices point at learnable steps only.
#[derive(Debug, Clone)]
pub struct StepTarget {
    pub step: usize,
    pub g_raw: f64,
    pub adv_raw: f64,
    pub g_norm: f64,
    pub adv_norm: f64,
}

/// n-step targets bootstrapped with the unnormalized value, truncated at
/// trial boundaries (each trial is its own horizon). `values[t]` must
/// hold the unnormalized prediction for step `t`.
pub fn compute_targets(
    traj: &Trajectory,
    values: &[f64],
    gamma: f64,
    n: usize,
) -> Vec<StepTarget> {
    assert!(n >= 1);
    let mut out = Vec::new();
    for (start, end, _) in traj.trial_spans() {
        for t in start..=end {
            let m = n.min(end + 1 - t);
            let mut g = 0.0;
            let mut discount = 1.0;
            for i in 0..m {
                g += discount * traj.steps[t + i].reward;
                discount *= gamma;
            }
            if t + m <= end {
                g += discount * values[t + m];
            }
            out.push(StepTarget {
                step: t,
                g_raw: g,
                adv_raw: g - values[t],
                g_norm: g,
                adv_norm: g - values[t],
            });
        }
    }
    out
}

/// Temperature and decoupled KL multipliers, optimized in log space so
/// positivity holds by construction.
#[derive(Debug, Clone)]
pub struct DualVariables {
    pub log_eta: f64,
    pub log_alpha_mu: f64,
    pub log_alpha_sigma: f64,
}

impl DualVariables {
    pub fn new(eta_init: f64, alpha_init: f64) -> DualVariables {
        DualVariables {
            log_eta: eta_init.ln(),
            log_alpha_mu: alpha_init.ln(),
            log_alpha_sigma: alpha_init.ln(),
        }
    }

    pub fn eta(&self) -> f64 {
        self.log_eta.exp()
    }

    pub fn alpha_mu(&self) -> f64 {
        self.log_alpha_mu.exp()
    }

    pub fn alpha_sigma(&self) -> f64 {
        self.log_alpha_sigma.exp()
    }
}

/// Indices of the top half of the batch by advantage (ties broken by
/// position, at least one sample), and the softmax weights over them at
/// temperature `eta`. Weights are treated as constants by the loss.
pub fn select_top_half(advantages: &[f64], eta: f64) -> (Vec<usize>, Vec<f64>) {
    assert!(!advantages.is_empty());
    let mut order: Vec<usize> = (0..advantages.len()).collect();
    order.sort_by(|&a, &b| {
        advantages[b]
            .partial_cmp(&advantages[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let keep = advantages.len().div_ceil(2);
    let mut selected: Vec<usize> = order[..keep].to_vec();
    selected.sort_unstable();
    let a_max = selected
        .iter()
        .map(|&i| advantages[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = selected
        .iter()
        .map(|&i| ((advantages[i] - a_max) / eta).exp())
        .collect();
    let z: f64 = exps.iter().sum();
    let weights = exps.iter().map(|e| e / z).collect();
    (selected, weights)
}

pub struct IterMetrics {
    pub iteration: u64,
    pub observed_steps: u64,
    pub env_steps: u64,
    pub mean_return: f64,
    pub collected_trial_success: f64,
    pub loss: f64,
    pub loss_policy: f64,
    pub loss_value: f64,
    pub loss_eta: f64,
    pub loss_alpha: f64,
    pub eta: f64,
    pub alpha_mu: f64,
    pub alpha_sigma: f64,
    pub kl: f64,
    pub buffer_len: usize,
    /// (task, successes, trials) in this iteration's collected batch.
    pub per_task: Vec<(String, usize, usize)>,
}

pub struct Learner {
    pub hyper: LearnerHyper,
    pub suite: Arc<Suite>,
    pub episode_cfg: EpisodeConfig,
    pub params: PolicyParams,
    pub popart: PopArtStats,
    pub duals: DualVariables,
    pub buffer: FifoBuffer,
    snapshot: Arc<PolicySnapshot>,
    adam: Vec<AdamState>,
    adam_duals: [AdamState; 3],
    pub iterations: u64,
    pub observed_steps: u64,
    pub env_steps: u64,
    pub episode_counter: u64,
    pub master_seed: u64,
    pub workers: usize,
    pub variant: Variant,
    /// Instrumentation: how often each buffered episode has been sampled.
    pub sample_counts: HashMap<u64, usize>,
    /// Mean KL per old-policy refresh window (soft trust-region check).
    pub kl_window: Vec<f64>,
    kl_accum: (f64, u64),
}

impl Learner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        hyper: LearnerHyper,
        popart_cfg: &PopArtConfig,
        episode_cfg: EpisodeConfig,
        suite: Arc<Suite>,
        params: PolicyParams,
        variant: Variant,
        master_seed: u64,
        workers: usize,
    ) -> Learner {
        assert!(!suite.train.is_empty(), "suite has no train tasks");
        let capacity = hyper.batch_size * hyper.t_target;
        let adam = params
            .store
            .values
            .iter()
            .map(|v| AdamState::new(v.len()))
            .collect();
        let n_tasks = suite.tasks.len();
        let snapshot = Arc::new(params.snapshot());
        Learner {
            duals: DualVariables::new(hyper.eta_init, hyper.alpha_init),
            hyper,
            suite,
            episode_cfg,
            params,
            popart: PopArtStats::new(n_tasks, popart_cfg.beta, popart_cfg.sigma_floor),
            buffer: FifoBuffer::new(capacity),
            snapshot,
            adam,
            adam_duals: [AdamState::new(1), AdamState::new(1), AdamState::new(1)],
            iterations: 0,
            observed_steps: 0,
            env_steps: 0,
            episode_counter: 0,
            master_seed,
            workers: workers.max(1),
            variant,
            sample_counts: HashMap::new(),
            kl_window: Vec::new(),
            kl_accum: (0.0, 0),
        }
    }

    pub fn old_policy(&self) -> Arc<PolicySnapshot> {
        self.snapshot.clone()
    }

    /// Re-freeze the old policy from the current parameters (used after
    /// restoring a checkpoint and at every `t_target` boundary).
    pub fn refresh_snapshot(&mut self) {
        self.snapshot = Arc::new(self.params.snapshot());
    }

    fn popart_enabled(&self) -> bool {
        self.variant != Variant::NoPopArt
    }

    /// Collect one batch of episodes with the frozen old policy, tasks
    /// drawn uniformly from the train split. Deterministic per
    /// (seed, iteration, slot) regardless of worker count.
    pub fn collect(&mut self) -> Vec<Trajectory> {
        let b = self.hyper.batch_size;
        let snapshot = self.snapshot.clone();
        let suite = self.suite.clone();
        let cfg = self.episode_cfg.clone();
        let master = self.master_seed;
        let iter = self.iterations;
        let base_id = self.episode_counter;

        let run_slot = |slot: usize| -> Trajectory {
            let mut rng = seeding::stream(master, "collect", seeding::mix(iter, slot as u64));
            let task = suite.train[rng.random_range(0..suite.train.len())];
            let mut actor = NetActor::new(snapshot.clone(), false);
            run_episode(
                suite.clone(),
                task,
                cfg.clone(),
                &mut actor,
                rng,
                base_id + slot as u64,
            )
        };

        let mut trajectories: Vec<Trajectory> = if self.workers <= 1 || b <= 1 {
            (0..b).map(run_slot).collect()
        } else {
            let workers = self.workers.min(b);
            let mut slots: Vec<Option<Trajectory>> = (0..b).map(|_| None).collect();
            let chunk = b.div_ceil(workers);
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for (w, chunk_slots) in slots.chunks_mut(chunk).enumerate() {
                    let run = &run_slot;
                    handles.push(scope.spawn(move || {
                        for (off, slot) in chunk_slots.iter_mut().enumerate() {
                            *slot = Some(run(w * chunk + off));
                        }
                    }));
                }
                for h in handles {
                    h.join().expect("rollout worker panicked");
                }
            });
            slots.into_iter().map(|t| t.expect("slot filled")).collect()
        };

        self.episode_counter += b as u64;
        for t in &mut trajectories {
            self.observed_steps += t.observed_steps() as u64;
            self.env_steps += t.inner_env_steps as u64;
        }
        trajectories
    }

    /// Unnormalized values for every step of a trajectory under the
    /// current parameters (incremental forward, no tape).
    fn values_for(&self, current: &PolicySnapshot, traj: &Trajectory) -> Vec<f64> {
        let task = &traj.task_name;
        let stats = self.popart.task(traj.task_index);
        let (sigma, mu) = if self.popart_enabled() {
            (stats.sigma, stats.mu)
        } else {
            (1.0, 0.0)
        };
        let mut mem = crate::policy::Memory::zeroed(current.cfg.layers);
        traj.steps
            .iter()
            .map(|s| {
                let out = current.forward_step(&s.obs, &mut mem).expect("obs width");
                current.value_for(task, &out.hidden, sigma, mu)
            })
            .collect()
    }

    /// One learning step. Refreshes the old policy every `t_target`
    /// iterations, collects, samples, normalizes, and applies one joint
    /// gradient update.
    pub fn iteration(&mut self) -> Result<IterMetrics, LearnerError> {
        if self.iterations > 0 && self.iterations % self.hyper.t_target as u64 == 0 {
            self.snapshot = Arc::new(self.params.snapshot());
            let (sum, count) = self.kl_accum;
            if count > 0 {
                self.kl_window.push(sum / count as f64);
            }
            self.kl_accum = (0.0, 0);
        }

        let collected = self.collect();
        let mut per_task: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let mut mean_return = 0.0;
        for t in &collected {
            mean_return += t.total_reward();
            let e = per_task.entry(t.task_name.clone()).or_default();
            for &s in &t.trial_results {
                e.1 += 1;
                if s {
                    e.0 += 1;
                }
            }
            self.buffer.push(Arc::new(t.clone()));
        }
        mean_return /= collected.len().max(1) as f64;
        let (succ, trials) = per_task
            .values()
            .fold((0, 0), |acc, v| (acc.0 + v.0, acc.1 + v.1));

        let mut rng = seeding::stream(self.master_seed, "batch", self.iterations);
        let batch = self.buffer.sample(self.hyper.batch_size, &mut rng);
        for t in &batch {
            *self.sample_counts.entry(t.episode_id).or_default() += 1;
        }

        // Targets under the current value function; the prediction is
        // invariant to the rescale below, so ordering is safe.
        let current = self.params.snapshot();
        let mut targets: Vec<Vec<StepTarget>> = batch
            .iter()
            .map(|t| {
                let values = self.values_for(&current, t);
                compute_targets(t, &values, self.hyper.gamma, self.hyper.n_step)
            })
            .collect();

        // Per-task statistics update, then one output-preserving head
        // rescale per task, then normalized targets for the loss.
        if self.popart_enabled() {
            let mut tasks: Vec<usize> = batch.iter().map(|t| t.task_index).collect();
            tasks.sort_unstable();
            tasks.dedup();
            for &task in &tasks {
                let old = self.popart.task(task);
                for (t, tgts) in batch.iter().zip(&targets) {
                    if t.task_index == task {
                        for tg in tgts {
                            self.popart.update(task, tg.g_raw);
                        }
                    }
                }
                let new = self.popart.task(task);
                let name = self.suite.tasks[task].spec.name.clone();
                let mut b = self.params.store.get(&format!("value.{name}.b"))[0];
                let w = self.params.store.get_mut(&format!("value.{name}.w"));
                rescale_head(w, &mut b, old.sigma, old.mu, new.sigma, new.mu);
                self.params.store.get_mut(&format!("value.{name}.b"))[0] = b;
            }
        }
        for (t, tgts) in batch.iter().zip(&mut targets) {
            let stats = self.popart.task(t.task_index);
            let (sigma, mu) = if self.popart_enabled() {
                (stats.sigma, stats.mu)
            } else {
                (1.0, 0.0)
            };
            for tg in tgts.iter_mut() {
                tg.g_norm = (tg.g_raw - mu) / sigma;
                tg.adv_norm = tg.adv_raw / sigma;
            }
        }

        let (loss_parts, metrics_kl) = self.gradient_step(&batch, &targets)?;

        self.kl_accum.0 += metrics_kl;
        self.kl_accum.1 += 1;
        self.iterations += 1;

        Ok(IterMetrics {
            iteration: self.iterations,
            observed_steps: self.observed_steps,
            env_steps: self.env_steps,
            mean_return,
            collected_trial_success: if trials > 0 {
                succ as f64 / trials as f64
            } else {
                0.0
            },
            loss: loss_parts[0],
            loss_policy: loss_parts[1],
            loss_value: loss_parts[2],
            loss_eta: loss_parts[3],
            loss_alpha: loss_parts[4],
            eta: self.duals.eta(),
            alpha_mu: self.duals.alpha_mu(),
            alpha_sigma: self.duals.alpha_sigma(),
            kl: metrics_kl,
            buffer_len: self.buffer.len(),
            per_task: per_task
                .into_iter()
                .map(|(k, (s, n))| (k, s, n))
                .collect(),
        })
    }

    /// Build the full loss on a tape and apply one Adam step to the
    /// parameters and duals. Returns ([total, policy, value, eta, alpha],
    /// mean KL against the behavior policy).
    fn gradient_step(
        &mut self,
        batch: &[Arc<Trajectory>],
        targets: &[Vec<StepTarget>],
    ) -> Result<([f64; 5], f64), LearnerError> {
        let mut tape = Tape::new();
        let reg = self.params.register(&mut tape)?;
        let log_eta = tape.leaf(vec![self.duals.log_eta], &[1])?;
        let log_alpha_mu = tape.leaf(vec![self.duals.log_alpha_mu], &[1])?;
        let log_alpha_sigma = tape.leaf(vec![self.duals.log_alpha_sigma], &[1])?;
        let eta = tape.exp(log_eta)?;
        let alpha_mu = tape.exp(log_alpha_mu)?;
        let alpha_sigma = tape.exp(log_alpha_sigma)?;

        let loss = build_vmpo_loss(
            &mut tape,
            &self.params,
            &reg,
            batch,
            targets,
            &self.hyper,
            self.duals.eta(),
            eta,
            alpha_mu,
            alpha_sigma,
        )?;

        let loss_val = tape.value(loss.total);
        if !loss_val.is_finite() {
            return Err(LearnerError::NonFinite {
                iteration: self.iterations,
                details: format!(
                    "policy={} value={} eta={} alpha={} tasks={:?}",
                    tape.value(loss.policy),
                    tape.value(loss.value),
                    tape.value(loss.eta),
                    tape.value(loss.alpha),
                    batch.iter().map(|t| t.task_name.clone()).collect::<Vec<_>>()
                ),
            });
        }
        let parts = [
            loss_val,
            tape.value(loss.policy),
            tape.value(loss.value),
            tape.value(loss.eta),
            tape.value(loss.alpha),
        ];
        tape.backward(loss.total)?;

        let lr = self.hyper.lr;
        let dual_lr = self.hyper.dual_lr;
        let betas = self.hyper.adam_betas;
        let eps = self.hyper.adam_eps;
        for (i, t) in reg.iter().enumerate() {
            if let Some(grad) = tape.grad(*t) {
                let grad = grad.to_vec();
                adam_step(
                    &mut self.params.store.values[i],
                    &grad,
                    &mut self.adam[i],
                    lr,
                    betas,
                    eps,
                );
            }
        }
        for (slot, (leaf, value)) in [
            (log_eta, &mut self.duals.log_eta),
            (log_alpha_mu, &mut self.duals.log_alpha_mu),
            (log_alpha_sigma, &mut self.duals.log_alpha_sigma),
        ]
        .into_iter()
        .enumerate()
        {
            if let Some(g) = tape.grad(leaf) {
                let g = [g[0]];
                let mut v = [*value];
                adam_step(&mut v, &g, &mut self.adam_duals[slot], dual_lr, betas, eps);
                *value = v[0].clamp(-18.0, 18.0);
            }
        }
        Ok((parts, loss.mean_kl))
    }
}

pub struct VmpoLoss {
    pub total: Tensor,
    pub policy: Tensor,
    pub value: Tensor,
    pub eta: Tensor,
    pub alpha: Tensor,
    pub mean_kl: f64,
}

/// Assemble the full loss for one sampled batch:
///
/// * top-half sample selection by normalized advantage with softmax
///   weights at the current temperature (weights are constants);
/// * weighted negative log-likelihood policy term;
/// * temperature dual loss `eta*eps + eta*log(mean exp(A/eta))`;
/// * decoupled mean/covariance KL penalties against the behavior policy
///   with stop-gradient alternation between multiplier and distance;
/// * half squared error of the normalized value prediction.
#[allow(clippy::too_many_arguments)]
pub fn build_vmpo_loss(
    tape: &mut Tape,
    params: &PolicyParams,
    reg: &[Tensor],
    batch: &[Arc<Trajectory>],
    targets: &[Vec<StepTarget>],
    hyper: &LearnerHyper,
    eta_value: f64,
    eta: Tensor,
    alpha_mu: Tensor,
    alpha_sigma: Tensor,
) -> Result<VmpoLoss, LearnerError> {
    const LN_2PI: f64 = 1.8378770664093453;
    let action_dim = params.cfg.action_dim;

    // Pool advantages across the batch and select the top half.
    let pooled: Vec<f64> = targets
        .iter()
        .flat_map(|t| t.iter().map(|s| s.adv_norm))
        .collect();
    assert!(!pooled.is_empty(), "batch without learnable steps");
    let (selected, weights) = select_top_half(&pooled, eta_value);
    let in_selection: HashMap<usize, f64> = selected
        .iter()
        .zip(&weights)
        .map(|(&i, &w)| (i, w))
        .collect();
    let a_max = selected
        .iter()
        .map(|&i| pooled[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let n_selected = selected.len();
    let n_total = pooled.len();

    let mut policy_terms: Option<Tensor> = None;
    let mut value_terms: Option<Tensor> = None;
    let mut dmu_terms: Option<Tensor> = None;
    let mut dsig_terms: Option<Tensor> = None;
    let mut exp_terms: Option<Tensor> = None;
    let mut mean_kl_accum = 0.0;

    let chain = |acc: &mut Option<Tensor>, tape: &mut Tape, t: Tensor| {
        *acc = Some(match acc.take() {
            None => t,
            Some(prev) => tape.add(prev, t).expect("scalar add"),
        });
    };

    let mut pool_offset = 0usize;
    for (traj, tgts) in batch.iter().zip(targets) {
        let obs: Vec<Vec<f64>> = traj.steps.iter().map(|s| s.obs.clone()).collect();
        let fwd = params
            .forward_sequence(tape, reg, &obs)
            .expect("batch observation width");
        let idx: Vec<usize> = tgts.iter().map(|t| t.step).collect();
        let n_i = idx.len();
        let mean_l = tape.gather_rows(fwd.mean, &idx)?;
        let hidden_l = tape.gather_rows(fwd.hidden, &idx)?;

        let actions: Vec<f64> = idx
            .iter()
            .flat_map(|&s| traj.steps[s].action.iter().copied())
            .collect();
        let actions = tape.leaf(actions, &[n_i, action_dim])?;
        let old_mean: Vec<f64> = idx
            .iter()
            .flat_map(|&s| traj.steps[s].behavior_mean.iter().copied())
            .collect();
        let old_mean = tape.leaf(old_mean, &[n_i, action_dim])?;
        let old_log_std: Vec<f64> = idx
            .iter()
            .flat_map(|&s| traj.steps[s].behavior_log_std.iter().copied())
            .collect();
        let old_log_std = tape.leaf(old_log_std, &[n_i, action_dim])?;

        // 2 sigma^2 under the new policy, broadcast over rows.
        let two_ls = tape.scale(fwd.log_std, 2.0)?;
        let var2 = tape.exp(two_ls)?;
        let denom = tape.scale(var2, 2.0)?;

        // Log-likelihood of the recorded actions.
        let diff = tape.sub(actions, mean_l)?;
        let d2 = tape.mul(diff, diff)?;
        let q = tape.div(d2, denom)?;
        let row_q = tape.sum_rows(q)?;
        let sum_ls = tape.sum_all(fwd.log_std)?;
        let lp = tape.add(row_q, sum_ls)?;
        let half_ln2pi = tape.scalar(action_dim as f64 / 2.0 * LN_2PI)?;
        let lp = tape.add(lp, half_ln2pi)?;
        let lp = tape.neg(lp)?; // [n_i] log-probabilities

        // Nonparametric weights, zero off the selected set.
        let psi: Vec<f64> = (0..n_i)
            .map(|r| in_selection.get(&(pool_offset + r)).copied().unwrap_or(0.0))
            .collect();
        let psi_t = tape.leaf(psi, &[n_i])?;
        let weighted = tape.mul(lp, psi_t)?;
        let contrib = tape.sum_all(weighted)?;
        let contrib = tape.neg(contrib)?;
        chain(&mut policy_terms, tape, contrib);

        // Value loss pieces (normalized prediction vs normalized target).
        let vhat = params
            .value_head(tape, reg, hidden_l, &traj.task_name)
            .expect("train task head");
        let tgt: Vec<f64> = tgts.iter().map(|t| t.g_norm).collect();
        let tgt = tape.leaf(tgt, &[n_i, 1])?;
        let verr = tape.sub(vhat, tgt)?;
        let verr2 = tape.mul(verr, verr)?;
        let vsum = tape.sum_all(verr2)?;
        chain(&mut value_terms, tape, vsum);

        // Decoupled KL(behavior || new) pieces.
        let md = tape.sub(old_mean, mean_l)?;
        let md2 = tape.mul(md, md)?;
        let mq = tape.div(md2, denom)?;
        let dmu = tape.sum_all(mq)?;
        chain(&mut dmu_terms, tape, dmu);

        let lsn_minus_lso = tape.sub(fwd.log_std, old_log_std)?;
        let neg2 = tape.scale(lsn_minus_lso, -2.0)?;
        let e = tape.exp(neg2)?;
        let half_e = tape.scale(e, 0.5)?;
        let t1 = tape.add(lsn_minus_lso, half_e)?;
        let half = tape.scalar(0.5)?;
        let t2 = tape.sub(t1, half)?;
        let dsig = tape.sum_all(t2)?;
        chain(&mut dsig_terms, tape, dsig);

        mean_kl_accum += tape.value(dmu) + tape.value(dsig);

        // Temperature pieces over this trajectory's selected samples.
        let sel_adv: Vec<f64> = (0..n_i)
            .filter(|r| in_selection.contains_key(&(pool_offset + r)))
            .map(|r| pooled[pool_offset + r] - a_max)
            .collect();
        if !sel_adv.is_empty() {
            let k = sel_adv.len();
            let sel = tape.leaf(sel_adv, &[k])?;
            let scaled = tape.div(sel, eta)?;
            let ex = tape.exp(scaled)?;
            let esum = tape.sum_all(ex)?;
            chain(&mut exp_terms, tape, esum);
        }

        pool_offset += n_i;
    }

    let policy_loss = policy_terms.expect("non-empty batch");
    let value_sum = value_terms.expect("non-empty batch");
    let value_loss = tape.scale(value_sum, 0.5 / n_total as f64)?;

    let exp_sum = exp_terms.expect("selected set non-empty");
    let mean_exp = tape.scale(exp_sum, 1.0 / n_selected as f64)?;
    let log_me = tape.log(mean_exp)?;
    let eta_log = tape.mul(eta, log_me)?;
    let eta_eps = tape.scale(eta, hyper.eps_eta)?;
    let eta_l1 = tape.add(eta_log, eta_eps)?;
    let a_max_c = tape.scalar(a_max)?;
    let eta_loss = tape.add(eta_l1, a_max_c)?;

    let dmu_mean = {
        let d = dmu_terms.expect("non-empty batch");
        tape.scale(d, 1.0 / n_total as f64)?
    };
    let dsig_mean = {
        let d = dsig_terms.expect("non-empty batch");
        tape.scale(d, 1.0 / n_total as f64)?
    };
    let mean_kl = mean_kl_accum / n_total as f64;

    // alpha * (eps - sg(d)) + sg(alpha) * d, for both decoupled parts.
    let dmu_val = tape.value(dmu_mean);
    let dsig_val = tape.value(dsig_mean);
    let amu_gap = tape.scalar(hyper.eps_alpha_mu - dmu_val)?;
    let amu_term = tape.mul(alpha_mu, amu_gap)?;
    let amu_pen = tape.scale(dmu_mean, tape.value(alpha_mu))?;
    let asig_gap = tape.scalar(hyper.eps_alpha_sigma - dsig_val)?;
    let asig_term = tape.mul(alpha_sigma, asig_gap)?;
    let asig_pen = tape.scale(dsig_mean, tape.value(alpha_sigma))?;
    let a1 = tape.add(amu_term, amu_pen)?;
    let a2 = tape.add(asig_term, asig_pen)?;
    let alpha_loss = tape.add(a1, a2)?;

    let t1 = tape.add(policy_loss, value_loss)?;
    let t2 = tape.add(t1, eta_loss)?;
    let total = tape.add(t2, alpha_loss)?;
    Ok(VmpoLoss {
        total,
        policy: policy_loss,
        value: value_loss,
        eta: eta_loss,
        alpha: alpha_loss,
        mean_kl,
    })
}

