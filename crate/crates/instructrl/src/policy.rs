//! Gated transformer sequence policy with a recurrent memory segment.
//!
//! Two forward paths share one parameter set:
//!
//! * [`PolicyParams::forward_sequence`] runs a whole episode through the
//!   gradient tape for training (teacher-forced, causal attention over a
//!   sliding window of `memory_length` past positions).
//! * [`PolicySnapshot::forward_step`] is a plain-float incremental step
//!   with cached keys/values, used by rollout workers and evaluation. It
//!   records no tape and must agree with the sequence path to 1e-9.
//!
//! Blocks follow the gated-transformer recipe: layer norm on submodule
//! inputs, relative position encoding in the attention (content and
//! position terms with learned global biases), ReLU on submodule outputs,
//! and GRU-style gating at both residual connections with the update gate
//! biased toward identity at initialization.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use autograd::{Result as TapeResult, Tape, Tensor, MASK_NEG};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::protocol::{Actor, ActorOutput};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("observation width {got} does not match configured width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("standard deviation must be positive, got {0}")]
    NonPositiveStd(f64),
    #[error("no value head for task {0:?}")]
    UnknownValueHead(String),
    #[error("sequence length {len} exceeds window capacity {max}")]
    TooLong { len: usize, max: usize },
}

#[derive(Debug, Clone)]
pub struct PolicyConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// How many past positions attention may reach; at least the longest
    /// episode so the first instruction stays visible to the last action.
    pub memory_length: usize,
    pub obs_width: usize,
    pub action_dim: usize,
}

impl PolicyConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Named flat parameter arrays in a fixed registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> usize {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), values.len(), "{name}");
        assert!(!self.index.contains_key(&name), "duplicate param {name}");
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(values);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.values[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f64> {
        let id = self.index[name];
        &mut self.values[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_out: usize, fan_in: usize, gain: f64) -> Vec<f64> {
    let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_out * fan_in)
        .map(|_| rng.random_range(-limit..limit))
        .collect()
}

/// Sinusoidal relative-distance table, `max_span + 1` rows of `width`.
fn sinusoid_table(max_span: usize, width: usize) -> Vec<f64> {
    let mut table = vec![0.0; (max_span + 1) * width];
    for d in 0..=max_span {
        for i in 0..width / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / width as f64);
            table[d * width + 2 * i] = (d as f64 * freq).sin();
            table[d * width + 2 * i + 1] = (d as f64 * freq).cos();
        }
    }
    table
}

/// The full parameter set plus constants derived from the configuration.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub cfg: PolicyConfig,
    pub store: ParamStore,
    /// Sorted task names owning a value head.
    pub value_tasks: Vec<String>,
    rel_table: Vec<f64>,
}

impl PolicyParams {
    pub fn new(cfg: PolicyConfig, value_tasks: &[String], rng: &mut ChaCha8Rng) -> PolicyParams {
        let w = cfg.width;
        let mut store = ParamStore::default();
        store.add("embed.w", vec![w, cfg.obs_width], xavier(rng, w, cfg.obs_width, 1.0));
        store.add("embed.b", vec![w], vec![0.0; w]);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("l{l}.{s}");
            store.add(p("ln1.g"), vec![w], vec![1.0; w]);
            store.add(p("ln1.b"), vec![w], vec![0.0; w]);
            for name in ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.wr"] {
                store.add(p(name), vec![w, w], xavier(rng, w, w, 1.0));
            }
            store.add(p("attn.bo"), vec![w], vec![0.0; w]);
            let dh = cfg.head_dim();
            for h in 0..cfg.heads {
                store.add(p(&format!("attn.u{h}")), vec![dh], vec![0.0; dh]);
                store.add(p(&format!("attn.v{h}")), vec![dh], vec![0.0; dh]);
            }
            for gate in ["gate1", "gate2"] {
                for m in ["wr", "ur", "wz", "uz", "wg", "ug"] {
                    store.add(p(&format!("{gate}.{m}")), vec![w, w], xavier(rng, w, w, 1.0));
                }
                // Positive update-gate bias keeps each block near identity
                // at initialization.
                store.add(p(&format!("{gate}.bg")), vec![w], vec![2.0; w]);
            }
            store.add(p("ln2.g"), vec![w], vec![1.0; w]);
            store.add(p("ln2.b"), vec![w], vec![0.0; w]);
            store.add(p("mlp.w1"), vec![cfg.mlp_hidden, w], xavier(rng, cfg.mlp_hidden, w, 1.0));
            store.add(p("mlp.b1"), vec![cfg.mlp_hidden], vec![0.0; cfg.mlp_hidden]);
            store.add(p("mlp.w2"), vec![w, cfg.mlp_hidden], xavier(rng, w, cfg.mlp_hidden, 1.0));
            store.add(p("mlp.b2"), vec![w], vec![0.0; w]);
        }
        store.add(
            "head.mean.w",
            vec![cfg.action_dim, w],
            xavier(rng, cfg.action_dim, w, 0.01),
        );
        store.add("head.mean.b", vec![cfg.action_dim], vec![0.0; cfg.action_dim]);
        // State-independent learned log-std, one per action dimension.
        store.add("head.log_std", vec![cfg.action_dim], vec![0.0; cfg.action_dim]);
        let mut value_tasks = value_tasks.to_vec();
        value_tasks.sort();
        for task in &value_tasks {
            store.add(format!("value.{task}.w"), vec![1, w], xavier(rng, 1, w, 0.1));
            store.add(format!("value.{task}.b"), vec![1], vec![0.0]);
        }
        let rel_table = sinusoid_table(cfg.memory_length, w);
        PolicyParams {
            cfg,
            store,
            value_tasks,
            rel_table,
        }
    }

    pub fn has_value_head(&self, task: &str) -> bool {
        self.store.id(&format!("value.{task}.w")).is_some()
    }

    /// Register every parameter on a tape, returning handles aligned with
    /// the store order.
    pub fn register(&self, tape: &mut Tape) -> TapeResult<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.store.len());
        for i in 0..self.store.len() {
            out.push(tape.leaf(self.store.values[i].clone(), &self.store.shapes[i])?);
        }
        Ok(out)
    }

    fn reg<'a>(&self, reg: &'a [Tensor], name: &str) -> Tensor {
        reg[self.store.id(name).unwrap_or_else(|| panic!("param {name}"))]
    }

    fn gru_gate(
        &self,
        tape: &mut Tape,
        reg: &[Tensor],
        prefix: &str,
        x: Tensor,
        y: Tensor,
    ) -> TapeResult<Tensor> {
        let g = |s: &str| self.reg(reg, &format!("{prefix}.{s}"));
        let yr = tape.matmul_nt(y, g("wr"))?;
        let xr = tape.matmul_nt(x, g("ur"))?;
        let r = tape.add(yr, xr)?;
        let r = tape.sigmoid(r)?;
        let yz = tape.matmul_nt(y, g("wz"))?;
        let xz = tape.matmul_nt(x, g("uz"))?;
        let z = tape.add(yz, xz)?;
        let z = tape.sub(z, g("bg"))?;
        let z = tape.sigmoid(z)?;
        let rx = tape.mul(r, x)?;
        let yg = tape.matmul_nt(y, g("wg"))?;
        let xg = tape.matmul_nt(rx, g("ug"))?;
        let h = tape.add(yg, xg)?;
        let h = tape.tanh(h)?;
        // (1 - z) * x + z * h written as x + z * (h - x).
        let hx = tape.sub(h, x)?;
        let zhx = tape.mul(z, hx)?;
        tape.add(x, zhx)
    }

    /// Causal-window mask: position `i` attends to `j` in
    /// `[i - memory_length, i]`.
    fn window_mask(&self, tape: &mut Tape, t: usize) -> TapeResult<Tensor> {
        let mut data = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                if j > i || i - j > self.cfg.memory_length {
                    data[i * t + j] = MASK_NEG;
                }
            }
        }
        tape.leaf(data, &[t, t])
    }

    /// Full-sequence forward through the tape: per-step Gaussian head and
    /// final hidden states. Output at `t` depends only on observations at
    /// `t' <= t`.
    pub fn forward_sequence(
        &self,
        tape: &mut Tape,
        reg: &[Tensor],
        obs: &[Vec<f64>],
    ) -> std::result::Result<SeqForward, PolicyError> {
        let t_len = obs.len();
        assert!(t_len > 0, "empty observation sequence");
        for o in obs {
            if o.len() != self.cfg.obs_width {
                return Err(PolicyError::WidthMismatch {
                    expected: self.cfg.obs_width,
                    got: o.len(),
                });
            }
        }
        let flat: Vec<f64> = obs.iter().flatten().copied().collect();
        Ok(self
            .forward_sequence_inner(tape, reg, flat, t_len)
            .expect("tape failure in forward_sequence"))
    }

    fn forward_sequence_inner(
        &self,
        tape: &mut Tape,
        reg: &[Tensor],
        flat_obs: Vec<f64>,
        t_len: usize,
    ) -> TapeResult<SeqForward> {
        let cfg = &self.cfg;
        let dh = cfg.head_dim();
        let obs = tape.leaf(flat_obs, &[t_len, cfg.obs_width])?;
        let mut x = tape.matmul_nt(obs, self.reg(reg, "embed.w"))?;
        x = tape.add(x, self.reg(reg, "embed.b"))?;

        let mask = self.window_mask(tape, t_len)?;
        // Relative distances used within this sequence: 0..t_len-1.
        // Distances beyond the attention window are masked out, so their
        // rows are irrelevant; keep them zero.
        let mut rel_rows = vec![0.0; t_len * cfg.width];
        let covered = t_len.min(cfg.memory_length + 1);
        rel_rows[..covered * cfg.width].copy_from_slice(&self.rel_table[..covered * cfg.width]);
        let rel = tape.leaf(rel_rows, &[t_len, cfg.width])?;
        let scale = 1.0 / (dh as f64).sqrt();

        for l in 0..cfg.layers {
            let p = |s: &str| format!("l{l}.{s}");
            let n1 = tape.layer_norm_rows(x, self.reg(reg, &p("ln1.g")), self.reg(reg, &p("ln1.b")))?;
            let q = tape.matmul_nt(n1, self.reg(reg, &p("attn.wq")))?;
            let k = tape.matmul_nt(n1, self.reg(reg, &p("attn.wk")))?;
            let v = tape.matmul_nt(n1, self.reg(reg, &p("attn.wv")))?;
            let pos = tape.matmul_nt(rel, self.reg(reg, &p("attn.wr")))?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                let ph = tape.slice_cols(pos, h * dh, dh)?;
                let qu = tape.add(qh, self.reg(reg, &p(&format!("attn.u{h}"))))?;
                let content = tape.matmul_nt(qu, kh)?;
                let qv = tape.add(qh, self.reg(reg, &p(&format!("attn.v{h}"))))?;
                let rel_scores = tape.matmul_nt(qv, ph)?;
                let rel_aligned = tape.rel_shift(rel_scores)?;
                let mut scores = tape.add(content, rel_aligned)?;
                scores = tape.scale(scores, scale)?;
                scores = tape.add(scores, mask)?;
                let attn = tape.softmax_rows(scores)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let merged = tape.concat_cols(&heads)?;
            let mut o = tape.matmul_nt(merged, self.reg(reg, &p("attn.wo")))?;
            o = tape.add(o, self.reg(reg, &p("attn.bo")))?;
            let y = tape.relu(o)?;
            x = self.gru_gate(tape, reg, &p("gate1"), x, y)?;

            let n2 = tape.layer_norm_rows(x, self.reg(reg, &p("ln2.g")), self.reg(reg, &p("ln2.b")))?;
            let mut m = tape.matmul_nt(n2, self.reg(reg, &p("mlp.w1")))?;
            m = tape.add(m, self.reg(reg, &p("mlp.b1")))?;
            m = tape.relu(m)?;
            let mut m2 = tape.matmul_nt(m, self.reg(reg, &p("mlp.w2")))?;
            m2 = tape.add(m2, self.reg(reg, &p("mlp.b2")))?;
            let y2 = tape.relu(m2)?;
            x = self.gru_gate(tape, reg, &p("gate2"), x, y2)?;
        }

        let mut mean = tape.matmul_nt(x, self.reg(reg, "head.mean.w"))?;
        mean = tape.add(mean, self.reg(reg, "head.mean.b"))?;
        Ok(SeqForward {
            mean,
            log_std: self.reg(reg, "head.log_std"),
            hidden: x,
        })
    }

    /// Normalized value prediction `W h + b` for one task, `[T, 1]`.
    pub fn value_head(
        &self,
        tape: &mut Tape,
        reg: &[Tensor],
        hidden: Tensor,
        task: &str,
    ) -> std::result::Result<Tensor, PolicyError> {
        let w_name = format!("value.{task}.w");
        if self.store.id(&w_name).is_none() {
            return Err(PolicyError::UnknownValueHead(task.to_string()));
        }
        let v = tape
            .matmul_nt(hidden, self.reg(reg, &w_name))
            .expect("value matmul");
        Ok(tape
            .add(v, self.reg(reg, &format!("value.{task}.b")))
            .expect("value bias"))
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot::new(self)
    }
}

pub struct SeqForward {
    pub mean: Tensor,
    pub log_std: Tensor,
    pub hidden: Tensor,
}

/// Per-layer cached keys/values for incremental stepping. Semantically a
/// zero-initialized fixed-length segment: unwritten slots are masked out
/// of attention, so a fresh memory behaves exactly like a memoryless
/// forward.
pub struct Memory {
    layers: Vec<VecDeque<(Vec<f64>, Vec<f64>)>>,
    pos: usize,
}

impl Memory {
    pub fn zeroed(layers: usize) -> Memory {
        Memory {
            layers: (0..layers).map(|_| VecDeque::new()).collect(),
            pos: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// Frozen copy of the parameters with precomputed relative-position
/// projections; drives rollouts and evaluation without recording a tape.
pub struct PolicySnapshot {
    pub cfg: PolicyConfig,
    pub store: ParamStore,
    /// Per layer: projected relative table `R @ Wr^T`, rows by distance.
    pos_proj: Vec<Vec<f64>>,
}

fn matvec_nt(w: &[f64], out_dim: usize, in_dim: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(x.len(), in_dim);
    let mut out = Vec::with_capacity(out_dim);
    for j in 0..out_dim {
        let row = &w[j * in_dim..(j + 1) * in_dim];
        let mut acc = 0.0;
        for k in 0..in_dim {
            acc += x[k] * row[k];
        }
        out.push(acc);
    }
    out
}

fn layer_norm_vec(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * g[i] + b[i])
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl PolicySnapshot {
    pub fn new(params: &PolicyParams) -> PolicySnapshot {
        let cfg = params.cfg.clone();
        let w = cfg.width;
        let span = cfg.memory_length;
        let mut pos_proj = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let wr = params.store.get(&format!("l{l}.attn.wr"));
            let mut proj = vec![0.0; (span + 1) * w];
            for d in 0..=span {
                let row = &params.rel_table[d * w..(d + 1) * w];
                let out = matvec_nt(wr, w, w, row);
                proj[d * w..(d + 1) * w].copy_from_slice(&out);
            }
            pos_proj.push(proj);
        }
        PolicySnapshot {
            cfg,
            store: params.store.clone(),
            pos_proj,
        }
    }

    fn get(&self, name: &str) -> &[f64] {
        self.store.get(name)
    }

    fn gru_gate_vec(&self, prefix: &str, x: &[f64], y: &[f64]) -> Vec<f64> {
        let w = self.cfg.width;
        let g = |s: &str| self.get(&format!("{prefix}.{s}"));
        let yr = matvec_nt(g("wr"), w, w, y);
        let xr = matvec_nt(g("ur"), w, w, x);
        let yz = matvec_nt(g("wz"), w, w, y);
        let xz = matvec_nt(g("uz"), w, w, x);
        let bg = g("bg");
        let r: Vec<f64> = (0..w).map(|i| sigmoid(yr[i] + xr[i])).collect();
        let z: Vec<f64> = (0..w).map(|i| sigmoid(yz[i] + xz[i] - bg[i])).collect();
        let rx: Vec<f64> = (0..w).map(|i| r[i] * x[i]).collect();
        let yg = matvec_nt(g("wg"), w, w, y);
        let xg = matvec_nt(g("ug"), w, w, &rx);
        (0..w)
            .map(|i| {
                let h = (yg[i] + xg[i]).tanh();
                x[i] + z[i] * (h - x[i])
            })
            .collect()
    }

    /// One incremental step. Appends this position's keys/values to the
    /// memory (evicting beyond `memory_length`) and returns the Gaussian
    /// head plus the final hidden state.
    pub fn forward_step(
        &self,
        obs: &[f64],
        memory: &mut Memory,
    ) -> std::result::Result<StepOutput, PolicyError> {
        let cfg = &self.cfg;
        if obs.len() != cfg.obs_width {
            return Err(PolicyError::WidthMismatch {
                expected: cfg.obs_width,
                got: obs.len(),
            });
        }
        let w = cfg.width;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let t = memory.pos;

        let mut x = matvec_nt(self.get("embed.w"), w, cfg.obs_width, obs);
        let eb = self.get("embed.b");
        for i in 0..w {
            x[i] += eb[i];
        }

        for l in 0..cfg.layers {
            let p = |s: &str| format!("l{l}.{s}");
            let n1 = layer_norm_vec(&x, self.get(&p("ln1.g")), self.get(&p("ln1.b")));
            let q = matvec_nt(self.get(&p("attn.wq")), w, w, &n1);
            let k = matvec_nt(self.get(&p("attn.wk")), w, w, &n1);
            let v = matvec_nt(self.get(&p("attn.wv")), w, w, &n1);

            let cache = &mut memory.layers[l];
            cache.push_back((k, v));
            if cache.len() > cfg.memory_length + 1 {
                cache.pop_front();
            }
            let span = cache.len();

            let mut merged = vec![0.0; w];
            for h in 0..cfg.heads {
                let hs = h * dh;
                let u = self.get(&p(&format!("attn.u{h}")));
                let vb = self.get(&p(&format!("attn.v{h}")));
                let proj = &self.pos_proj[l];
                let mut scores = Vec::with_capacity(span);
                for (ci, (ck, _)) in cache.iter().enumerate() {
                    // Absolute position of cache entry ci is t - (span-1) + ci.
                    let dist = span - 1 - ci;
                    let mut content = 0.0;
                    for i in 0..dh {
                        content += (q[hs + i] + u[i]) * ck[hs + i];
                    }
                    let prow = &proj[dist * w + hs..dist * w + hs + dh];
                    let mut relterm = 0.0;
                    for i in 0..dh {
                        relterm += (q[hs + i] + vb[i]) * prow[i];
                    }
                    scores.push((content + relterm) * scale);
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for (ci, (_, cv)) in cache.iter().enumerate() {
                    let a = scores[ci] / sum;
                    for i in 0..dh {
                        merged[hs + i] += a * cv[hs + i];
                    }
                }
            }
            let mut o = matvec_nt(self.get(&p("attn.wo")), w, w, &merged);
            let bo = self.get(&p("attn.bo"));
            for i in 0..w {
                o[i] = (o[i] + bo[i]).max(0.0);
            }
            x = self.gru_gate_vec(&p("gate1"), &x, &o);

            let n2 = layer_norm_vec(&x, self.get(&p("ln2.g")), self.get(&p("ln2.b")));
            let mut m = matvec_nt(self.get(&p("mlp.w1")), cfg.mlp_hidden, w, &n2);
            let b1 = self.get(&p("mlp.b1"));
            for i in 0..cfg.mlp_hidden {
                m[i] = (m[i] + b1[i]).max(0.0);
            }
            let mut m2 = matvec_nt(self.get(&p("mlp.w2")), w, cfg.mlp_hidden, &m);
            let b2 = self.get(&p("mlp.b2"));
            for i in 0..w {
                m2[i] = (m2[i] + b2[i]).max(0.0);
            }
            x = self.gru_gate_vec(&p("gate2"), &x, &m2);
        }
        memory.pos = t + 1;

        let mut mean = matvec_nt(self.get("head.mean.w"), cfg.action_dim, w, &x);
        let mb = self.get("head.mean.b");
        for i in 0..cfg.action_dim {
            mean[i] += mb[i];
        }
        Ok(StepOutput {
            mean,
            log_std: self.get("head.log_std").to_vec(),
            hidden: x,
        })
    }

    /// Unnormalized value `sigma * (W h + b) + mu` for one task's head.
    pub fn value_for(&self, task: &str, hidden: &[f64], sigma: f64, mu: f64) -> f64 {
        let w = self.get(&format!("value.{task}.w"));
        let b = self.get(&format!("value.{task}.b"))[0];
        crate::popart::unnormalized_value(w, b, hidden, sigma, mu)
    }
}

/// Diagonal-Gaussian parameters.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianParams {
    pub fn from_std(mean: Vec<f64>, std: Vec<f64>) -> std::result::Result<Self, PolicyError> {
        for &s in &std {
            if s <= 0.0 {
                return Err(PolicyError::NonPositiveStd(s));
            }
        }
        Ok(GaussianParams {
            mean,
            log_std: std.iter().map(|s| s.ln()).collect(),
        })
    }
}

/// Log density of `action` under a diagonal Gaussian.
pub fn log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    const LN_2PI: f64 = 1.8378770664093453;
    let mut lp = 0.0;
    for i in 0..mean.len() {
        let z = (action[i] - mean[i]) / log_std[i].exp();
        lp -= 0.5 * (z * z + LN_2PI) + log_std[i];
    }
    lp
}

/// KL(p || q) for diagonal Gaussians, split into a mean term (q's
/// covariance, means differ) and a covariance term (means equal,
/// covariances differ). The two sum exactly to the total KL.
pub fn kl_diag_gaussian(p: &GaussianParams, q: &GaussianParams) -> (f64, f64) {
    let mut kl_mean = 0.0;
    let mut kl_cov = 0.0;
    for i in 0..p.mean.len() {
        let (lsp, lsq) = (p.log_std[i], q.log_std[i]);
        let var_q = (2.0 * lsq).exp();
        let dm = p.mean[i] - q.mean[i];
        kl_mean += dm * dm / (2.0 * var_q);
        kl_cov += lsq - lsp + (2.0 * (lsp - lsq)).exp() / 2.0 - 0.5;
    }
    (kl_mean, kl_cov)
}

/// Sample from the Gaussian head. The raw sample is recorded; the
/// environment clamps on application.
pub fn sample_action(mean: &[f64], log_std: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    mean.iter()
        .zip(log_std)
        .map(|(m, ls)| {
            let z: f64 = rng.sample(StandardNormal);
            m + ls.exp() * z
        })
        .collect()
}

/// Policy snapshot behind the episode-controller interface.
pub struct NetActor {
    pub snapshot: Arc<PolicySnapshot>,
    memory: Memory,
    pub deterministic: bool,
}

impl NetActor {
    pub fn new(snapshot: Arc<PolicySnapshot>, deterministic: bool) -> NetActor {
        let layers = snapshot.cfg.layers;
        NetActor {
            snapshot,
            memory: Memory::zeroed(layers),
            deterministic,
        }
    }
}

impl Actor for NetActor {
    fn begin_episode(&mut self) {
        self.memory = Memory::zeroed(self.snapshot.cfg.layers);
    }

    fn act(
        &mut self,
        obs: &[f64],
        _env_state: &crate::envs::EnvState,
        _spec: &crate::envs::TaskSpec,
        rng: &mut ChaCha8Rng,
    ) -> ActorOutput {
        let out = self
            .snapshot
            .forward_step(obs, &mut self.memory)
            .expect("observation width");
        let action = if self.deterministic {
            out.mean.clone()
        } else {
            sample_action(&out.mean, &out.log_std, rng)
        };
        ActorOutput {
            action,
            mean: out.mean,
            log_std: out.log_std,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_cfg() -> PolicyConfig {
        PolicyConfig {
            layers: 2,
            width: 8,
            heads: 2,
            mlp_hidden: 12,
            memory_length: 32,
            obs_width: 5,
            action_dim: 2,
        }
    }

    fn tiny_params(seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyParams::new(tiny_cfg(), &["taska".to_string()], &mut rng)
    }

    fn random_obs(rng: &mut ChaCha8Rng, t: usize, width: usize) -> Vec<Vec<f64>> {
        (0..t)
            .map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn seq_means(params: &PolicyParams, obs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let reg = params.register(&mut tape).unwrap();
        let fwd = params.forward_sequence(&mut tape, &reg, obs).unwrap();
        let data = tape.data(fwd.mean);
        let a = params.cfg.action_dim;
        (0..obs.len()).map(|t| data[t * a..(t + 1) * a].to_vec()).collect()
    }

    #[test]
    fn stepwise_matches_sequence_forward() {
        let params = tiny_params(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = random_obs(&mut rng, 12, params.cfg.obs_width);
        let seq = seq_means(&params, &obs);

        let snap = params.snapshot();
        let mut mem = Memory::zeroed(params.cfg.layers);
        for (t, o) in obs.iter().enumerate() {
            let out = snap.forward_step(o, &mut mem).unwrap();
            for (a, b) in out.mean.iter().zip(&seq[t]) {
                assert!(
                    (a - b).abs() < 1e-9,
                    "t={t}: stepwise {a} vs sequence {b}"
                );
            }
        }
    }

    #[test]
    fn stepwise_matches_sequence_with_eviction() {
        // Sequence longer than the window: eviction and the mask must agree.
        let mut cfg = tiny_cfg();
        cfg.memory_length = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = PolicyParams::new(cfg, &[], &mut rng);
        let obs = random_obs(&mut rng, 11, params.cfg.obs_width);
        let seq = seq_means(&params, &obs);
        let snap = params.snapshot();
        let mut mem = Memory::zeroed(params.cfg.layers);
        for (t, o) in obs.iter().enumerate() {
            let out = snap.forward_step(o, &mut mem).unwrap();
            for (a, b) in out.mean.iter().zip(&seq[t]) {
                assert!((a - b).abs() < 1e-9, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn first_step_equals_memoryless_forward() {
        let params = tiny_params(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let obs = random_obs(&mut rng, 1, params.cfg.obs_width);
        let seq = seq_means(&params, &obs);
        let snap = params.snapshot();
        let mut mem = Memory::zeroed(params.cfg.layers);
        let out = snap.forward_step(&obs[0], &mut mem).unwrap();
        for (a, b) in out.mean.iter().zip(&seq[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_given_identical_inputs() {
        let params = tiny_params(7);
        let snap = params.snapshot();
        let obs = vec![0.3; params.cfg.obs_width];
        let mut m1 = Memory::zeroed(params.cfg.layers);
        let mut m2 = Memory::zeroed(params.cfg.layers);
        let a = snap.forward_step(&obs, &mut m1).unwrap();
        let b = snap.forward_step(&obs, &mut m2).unwrap();
        assert_eq!(a.mean, b.mean);
    }

    #[test]
    fn causality_perturbation_leaves_earlier_outputs_untouched() {
        let params = tiny_params(8);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut obs = random_obs(&mut rng, 14, params.cfg.obs_width);
        let base = seq_means(&params, &obs);
        obs[10][0] += 1.0;
        let perturbed = seq_means(&params, &obs);
        for t in 0..10 {
            assert_eq!(base[t], perturbed[t], "output changed at t={t}");
        }
        assert_ne!(base[10], perturbed[10]);
    }

    #[test]
    fn different_instruction_prefixes_change_trial_actions() {
        let params = tiny_params(9);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trial_obs = random_obs(&mut rng, 4, params.cfg.obs_width);
        let mut prefix_a = random_obs(&mut rng, 3, params.cfg.obs_width);
        let mut prefix_b = random_obs(&mut rng, 3, params.cfg.obs_width);
        prefix_a.extend(trial_obs.clone());
        prefix_b.extend(trial_obs);
        let a = seq_means(&params, &prefix_a);
        let b = seq_means(&params, &prefix_b);
        let last = a.len() - 1;
        let diff: f64 = a[last]
            .iter()
            .zip(&b[last])
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-8, "policy ignores its instruction prefix");
    }

    #[test]
    fn zeroed_instruction_part_hides_task_identity() {
        // Identical observations (instruction slots zeroed) must yield
        // identical outputs regardless of which instruction was sampled.
        let params = tiny_params(12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let obs = random_obs(&mut rng, 6, params.cfg.obs_width);
        let a = seq_means(&params, &obs);
        let b = seq_means(&params, &obs);
        assert_eq!(a, b);
    }

    #[test]
    fn width_mismatch_is_a_contract_error() {
        let params = tiny_params(14);
        let snap = params.snapshot();
        let mut mem = Memory::zeroed(params.cfg.layers);
        let err = snap.forward_step(&[0.0; 3], &mut mem).unwrap_err();
        assert!(matches!(err, PolicyError::WidthMismatch { .. }));
    }

    #[test]
    fn kl_zero_for_identical_distributions() {
        let p = GaussianParams {
            mean: vec![0.3, -0.7],
            log_std: vec![0.1, -0.2],
        };
        let (km, kc) = kl_diag_gaussian(&p, &p.clone());
        assert_eq!(km, 0.0);
        assert!(kc.abs() < 1e-15);
    }

    #[test]
    fn kl_one_dimensional_analytic() {
        let p = GaussianParams {
            mean: vec![0.0],
            log_std: vec![0.0],
        };
        let q = GaussianParams {
            mean: vec![1.0],
            log_std: vec![0.0],
        };
        let (km, kc) = kl_diag_gaussian(&p, &q);
        assert!((km - 0.5).abs() < 1e-15);
        assert!(kc.abs() < 1e-15);
    }

    #[test]
    fn kl_parts_sum_to_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let dim = 3;
            let draw = |rng: &mut ChaCha8Rng| GaussianParams {
                mean: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                log_std: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            let (km, kc) = kl_diag_gaussian(&p, &q);
            // Closed-form total KL.
            let mut total = 0.0;
            for i in 0..dim {
                let (sp, sq) = (p.log_std[i].exp(), q.log_std[i].exp());
                total += (sq / sp).ln()
                    + (sp * sp + (p.mean[i] - q.mean[i]).powi(2)) / (2.0 * sq * sq)
                    - 0.5;
            }
            assert!(
                ((km + kc) - total).abs() <= 1e-12,
                "decomposition {0} vs total {total}",
                km + kc
            );
        }
    }

    #[test]
    fn log_prob_matches_direct_density() {
        let mean = vec![0.5, -0.5];
        let log_std = vec![0.2, -0.3];
        let action = vec![0.7, 0.1];
        let lp = log_prob(&mean, &log_std, &action);
        let mut direct = 0.0;
        for i in 0..2 {
            let s = log_std[i].exp();
            let pdf = (-((action[i] - mean[i]).powi(2)) / (2.0 * s * s)).exp()
                / (s * (2.0 * std::f64::consts::PI).sqrt());
            direct += pdf.ln();
        }
        assert!((lp - direct).abs() < 1e-12);
    }

    #[test]
    fn non_positive_std_is_rejected() {
        let err = GaussianParams::from_std(vec![0.0], vec![0.0]).unwrap_err();
        assert!(matches!(err, PolicyError::NonPositiveStd(_)));
    }

    #[test]
    fn sequence_gradients_match_finite_differences() {
        // Weighted sum of policy means, value head, and log-std against
        // every parameter of a tiny network.
        let mut cfg = tiny_cfg();
        cfg.layers = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut params = PolicyParams::new(cfg, &["taska".to_string()], &mut rng);
        let obs = random_obs(&mut rng, 4, params.cfg.obs_width);
        let w_mean: Vec<f64> = (0..4 * params.cfg.action_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let w_val: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

        let eval = |params: &PolicyParams, want_grad: bool| -> (f64, Option<Vec<Vec<f64>>>) {
            let mut tape = Tape::new();
            let reg = params.register(&mut tape).unwrap();
            let fwd = params.forward_sequence(&mut tape, &reg, &obs).unwrap();
            let wm = tape.leaf(w_mean.clone(), &[4, params.cfg.action_dim]).unwrap();
            let pm = tape.mul(fwd.mean, wm).unwrap();
            let sm = tape.sum_all(pm).unwrap();
            let val = params.value_head(&mut tape, &reg, fwd.hidden, "taska").unwrap();
            let wv = tape.leaf(w_val.clone(), &[4, 1]).unwrap();
            let pv = tape.mul(val, wv).unwrap();
            let sv = tape.sum_all(pv).unwrap();
            let sl = tape.sum_all(fwd.log_std).unwrap();
            let t1 = tape.add(sm, sv).unwrap();
            let loss = tape.add(t1, sl).unwrap();
            let value = tape.value(loss);
            if want_grad {
                tape.backward(loss).unwrap();
                let grads = reg
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        tape.grad(*t)
                            .map(|g| g.to_vec())
                            .unwrap_or_else(|| vec![0.0; params.store.values[i].len()])
                    })
                    .collect();
                (value, Some(grads))
            } else {
                (value, None)
            }
        };

        let (_, grads) = eval(&params, true);
        let grads = grads.unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for pi in 0..params.store.len() {
            let n = params.store.values[pi].len();
            // Probe a subset of coordinates per array to keep runtime sane.
            let stride = (n / 6).max(1);
            for j in (0..n).step_by(stride) {
                let orig = params.store.values[pi][j];
                params.store.values[pi][j] = orig + h;
                let (fp, _) = eval(&params, false);
                params.store.values[pi][j] = orig - h;
                let (fm, _) = eval(&params, false);
                params.store.values[pi][j] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = grads[pi][j];
                let err = (fd - an).abs();
                assert!(
                    err <= 1e-5 * an.abs().max(fd.abs()) + 1e-7,
                    "param {} coord {j}: analytic {an} vs fd {fd}",
                    params.store.names[pi]
                );
                checked += 1;
            }
        }
        assert!(checked > 100, "checked only {checked} coordinates");
    }
}
