//! Define-by-run gradient tape.
//!
//! A `Tape` records every operation of one forward pass in topological
//! order. `backward` replays the record once in reverse, accumulating
//! vector-Jacobian products into per-node gradient buffers. The tape is
//! rebuilt for every forward pass; after `backward` it is consumed and
//! rejects further recording.

use crate::error::{Result, TensorError};

/// Handle to a node on a [`Tape`]. Cheap to copy; only meaningful for the
/// tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    pub(crate) id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Exp,
    Log,
    Tanh,
    Relu,
    Sigmoid,
    Neg,
    Sqrt,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    MatmulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Unary { a: usize, kind: UnaryKind },
    Scale { a: usize, c: f64 },
    SoftmaxRows { a: usize },
    LayerNormRows { a: usize, gain: usize, bias: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    SumRows { a: usize },
    GatherRows { a: usize, indices: Vec<usize> },
    SliceCols { a: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    RelShift { a: usize },
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
}

/// Records one forward pass and computes gradients for it.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub(crate) consumed: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad: None,
        });
        Tensor { id }
    }

    pub(crate) fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    /// Record a leaf holding `data` with the given shape. Leaves receive
    /// gradients but have no inputs; both constants and parameters enter
    /// the tape this way.
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.check_open()?;
        if numel(shape) != data.len() {
            return Err(TensorError::BadShape {
                op: "leaf",
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), data))
    }

    /// Scalar leaf with shape [1].
    pub fn scalar(&mut self, v: f64) -> Result<Tensor> {
        self.leaf(vec![v], &[1])
    }

    pub fn data(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].data
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    /// Value of a single-element tensor.
    pub fn value(&self, t: Tensor) -> f64 {
        debug_assert_eq!(self.nodes[t.id].data.len(), 1);
        self.nodes[t.id].data[0]
    }

    /// Gradient of `t`, populated by `backward` for every ancestor of the
    /// loss. `None` if no gradient flowed to this node.
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.id].grad.as_deref()
    }

    /// Reverse pass from a scalar loss. Populates gradients for every node
    /// the loss depends on and consumes the tape; a second call (or further
    /// recording) is a contract error.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        self.check_open()?;
        if self.nodes[loss.id].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.id].shape.clone(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(d_out) = grads[id].take() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            self.backward_op(id, &op, &d_out, &mut grads);
            self.nodes[id].grad = Some(d_out);
        }
        // Nodes recorded after the loss, or never reached, keep grad = None.
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.nodes[id].grad = Some(g);
            }
        }
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, add: impl Fn(&mut [f64])) {
        let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
        add(slot);
    }

    fn backward_op(&self, id: usize, op: &Op, d_out: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = mat_dims(&self.nodes[a].shape);
                let n = self.nodes[b].shape[1];
                let a_data = &self.nodes[a].data;
                let b_data = &self.nodes[b].data;
                // dA = dOut @ B^T
                Self::accumulate(grads, a, m * k, |da| {
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            let dr = &d_out[i * n..(i + 1) * n];
                            let br = &b_data[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                acc += dr[j] * br[j];
                            }
                            da[i * k + kk] += acc;
                        }
                    }
                });
                // dB = A^T @ dOut
                Self::accumulate(grads, b, k * n, |db| {
                    for i in 0..m {
                        let ar = &a_data[i * k..(i + 1) * k];
                        let dr = &d_out[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let av = ar[kk];
                            let row = &mut db[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                row[j] += av * dr[j];
                            }
                        }
                    }
                });
            }
            Op::MatmulNt { a, b } => {
                // out[m,n] = A[m,k] @ B[n,k]^T
                let (m, k) = mat_dims(&self.nodes[a].shape);
                let n = self.nodes[b].shape[0];
                let a_data = &self.nodes[a].data;
                let b_data = &self.nodes[b].data;
                // dA = dOut @ B
                Self::accumulate(grads, a, m * k, |da| {
                    for i in 0..m {
                        let dr = &d_out[i * n..(i + 1) * n];
                        let row = &mut da[i * k..(i + 1) * k];
                        for j in 0..n {
                            let dv = dr[j];
                            let br = &b_data[j * k..(j + 1) * k];
                            for kk in 0..k {
                                row[kk] += dv * br[kk];
                            }
                        }
                    }
                });
                // dB[j,kk] = sum_i dOut[i,j] * A[i,kk]
                Self::accumulate(grads, b, n * k, |db| {
                    for i in 0..m {
                        let dr = &d_out[i * n..(i + 1) * n];
                        let ar = &a_data[i * k..(i + 1) * k];
                        for j in 0..n {
                            let dv = dr[j];
                            let row = &mut db[j * k..(j + 1) * k];
                            for kk in 0..k {
                                row[kk] += dv * ar[kk];
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.acc_broadcast(grads, a, d_out, 1.0, a, b);
                self.acc_broadcast(grads, b, d_out, 1.0, a, b);
            }
            Op::Sub { a, b } => {
                self.acc_broadcast(grads, a, d_out, 1.0, a, b);
                self.acc_broadcast(grads, b, d_out, -1.0, a, b);
            }
            Op::Mul { a, b } => {
                let bd: Vec<f64> = self.nodes[b].data.clone();
                let ad: Vec<f64> = self.nodes[a].data.clone();
                let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
                let out_len = d_out.len();
                let cols = trailing_dim(&self.nodes[id].shape);
                Self::accumulate(grads, a, ad.len(), |da| {
                    for f in 0..out_len {
                        da[map_flat(f, ad.len(), &sa, cols)] += d_out[f] * bd[map_flat(f, bd.len(), &sb, cols)];
                    }
                });
                Self::accumulate(grads, b, bd.len(), |db| {
                    for f in 0..out_len {
                        db[map_flat(f, bd.len(), &sb, cols)] += d_out[f] * ad[map_flat(f, ad.len(), &sa, cols)];
                    }
                });
            }
            Op::Div { a, b } => {
                let bd: Vec<f64> = self.nodes[b].data.clone();
                let ad: Vec<f64> = self.nodes[a].data.clone();
                let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
                let out_len = d_out.len();
                let cols = trailing_dim(&self.nodes[id].shape);
                Self::accumulate(grads, a, ad.len(), |da| {
                    for f in 0..out_len {
                        da[map_flat(f, ad.len(), &sa, cols)] += d_out[f] / bd[map_flat(f, bd.len(), &sb, cols)];
                    }
                });
                Self::accumulate(grads, b, bd.len(), |db| {
                    for f in 0..out_len {
                        let bi = map_flat(f, bd.len(), &sb, cols);
                        let ai = map_flat(f, ad.len(), &sa, cols);
                        db[bi] -= d_out[f] * ad[ai] / (bd[bi] * bd[bi]);
                    }
                });
            }
            Op::Unary { a, kind } => {
                let out = &self.nodes[id].data;
                let input = &self.nodes[a].data;
                Self::accumulate(grads, a, input.len(), |da| {
                    for i in 0..input.len() {
                        let d = match kind {
                            UnaryKind::Exp => out[i],
                            UnaryKind::Log => 1.0 / input[i],
                            UnaryKind::Tanh => 1.0 - out[i] * out[i],
                            UnaryKind::Relu => {
                                if input[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sigmoid => out[i] * (1.0 - out[i]),
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Sqrt => 0.5 / out[i],
                        };
                        da[i] += d_out[i] * d;
                    }
                });
            }
            Op::Scale { a, c } => {
                Self::accumulate(grads, a, d_out.len(), |da| {
                    for i in 0..d_out.len() {
                        da[i] += c * d_out[i];
                    }
                });
            }
            Op::SoftmaxRows { a } => {
                let out = &self.nodes[id].data;
                let (rows, cols) = mat_dims(&self.nodes[id].shape);
                Self::accumulate(grads, a, out.len(), |da| {
                    for r in 0..rows {
                        let base = r * cols;
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dot += d_out[base + c] * out[base + c];
                        }
                        for c in 0..cols {
                            da[base + c] += out[base + c] * (d_out[base + c] - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows { a, gain, bias } => {
                let (rows, cols) = mat_dims(&self.nodes[a].shape);
                let input = &self.nodes[a].data;
                let g = self.nodes[gain].data.clone();
                Self::accumulate(grads, bias, cols, |dbias| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dbias[c] += d_out[r * cols + c];
                        }
                    }
                });
                // Recompute per-row normalization for gain and input grads.
                let mut norm = vec![0.0; rows * cols];
                let mut inv_std = vec![0.0; rows];
                for r in 0..rows {
                    let row = &input[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
                    let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    inv_std[r] = is;
                    for c in 0..cols {
                        norm[r * cols + c] = (row[c] - mean) * is;
                    }
                }
                Self::accumulate(grads, gain, cols, |dgain| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dgain[c] += d_out[r * cols + c] * norm[r * cols + c];
                        }
                    }
                });
                Self::accumulate(grads, a, input.len(), |da| {
                    for r in 0..rows {
                        let base = r * cols;
                        let n = cols as f64;
                        let mut mean_dy = 0.0;
                        let mut mean_dy_y = 0.0;
                        for c in 0..cols {
                            let dy = d_out[base + c] * g[c];
                            mean_dy += dy;
                            mean_dy_y += dy * norm[base + c];
                        }
                        mean_dy /= n;
                        mean_dy_y /= n;
                        for c in 0..cols {
                            let dy = d_out[base + c] * g[c];
                            da[base + c] +=
                                inv_std[r] * (dy - mean_dy - norm[base + c] * mean_dy_y);
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                let len = self.nodes[a].data.len();
                Self::accumulate(grads, a, len, |da| {
                    for v in da.iter_mut() {
                        *v += d_out[0];
                    }
                });
            }
            Op::MeanAll { a } => {
                let len = self.nodes[a].data.len();
                let scale = 1.0 / len as f64;
                Self::accumulate(grads, a, len, |da| {
                    for v in da.iter_mut() {
                        *v += d_out[0] * scale;
                    }
                });
            }
            Op::SumRows { a } => {
                let (rows, cols) = mat_dims(&self.nodes[a].shape);
                Self::accumulate(grads, a, rows * cols, |da| {
                    for r in 0..rows {
                        for c in 0..cols {
                            da[r * cols + c] += d_out[r];
                        }
                    }
                });
            }
            Op::GatherRows { a, ref indices } => {
                let (_, cols) = mat_dims(&self.nodes[a].shape);
                let len = self.nodes[a].data.len();
                Self::accumulate(grads, a, len, |da| {
                    for (r, &src) in indices.iter().enumerate() {
                        for c in 0..cols {
                            da[src * cols + c] += d_out[r * cols + c];
                        }
                    }
                });
            }
            Op::SliceCols { a, start, len } => {
                let (rows, cols) = mat_dims(&self.nodes[a].shape);
                Self::accumulate(grads, a, rows * cols, |da| {
                    for r in 0..rows {
                        for c in 0..len {
                            da[r * cols + start + c] += d_out[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatCols { ref parts } => {
                let rows = self.nodes[id].shape[0];
                let total: usize = self.nodes[id].shape[1];
                let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p].shape[1]).collect();
                let mut offset = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let w = widths[pi];
                    Self::accumulate(grads, p, rows * w, |dp| {
                        for r in 0..rows {
                            for c in 0..w {
                                dp[r * w + c] += d_out[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows { ref parts } => {
                let cols = self.nodes[id].shape[1];
                let mut offset = 0;
                for &p in parts.iter() {
                    let rows = self.nodes[p].shape[0];
                    let len = rows * cols;
                    Self::accumulate(grads, p, len, |dp| {
                        dp.iter_mut()
                            .zip(&d_out[offset * cols..offset * cols + len])
                            .for_each(|(g, d)| *g += d);
                    });
                    offset += rows;
                }
            }
            Op::RelShift { a } => {
                let (rows, rel) = mat_dims(&self.nodes[a].shape);
                Self::accumulate(grads, a, rows * rel, |da| {
                    for i in 0..rows {
                        for j in 0..=i.min(rows - 1) {
                            let dist = i - j;
                            if dist < rel {
                                da[i * rel + dist] += d_out[i * rows + j];
                            }
                        }
                    }
                });
            }
        }
    }

    /// Accumulate `factor * d_out` into a broadcast operand of a binary op.
    fn acc_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: usize,
        d_out: &[f64],
        factor: f64,
        a: usize,
        b: usize,
    ) {
        let t_len = self.nodes[target].data.len();
        let t_shape = self.nodes[target].shape.clone();
        let out_shape = if self.nodes[a].data.len() >= self.nodes[b].data.len() {
            self.nodes[a].shape.clone()
        } else {
            self.nodes[b].shape.clone()
        };
        let cols = trailing_dim(&out_shape);
        Self::accumulate(grads, target, t_len, |dt| {
            for f in 0..d_out.len() {
                dt[map_flat(f, t_len, &t_shape, cols)] += factor * d_out[f];
            }
        });
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) fn mat_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("expected 1-D or 2-D shape, got {shape:?}"),
    }
}

pub(crate) fn trailing_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

/// Map a flat index of the broadcast output onto an operand that may be a
/// scalar, a row vector over the trailing dimension, or full-shaped.
pub(crate) fn map_flat(flat: usize, operand_len: usize, operand_shape: &[usize], out_cols: usize) -> usize {
    if operand_len == 1 {
        0
    } else if operand_shape.len() == 1 && operand_len == out_cols {
        flat % out_cols
    } else {
        flat
    }
}
