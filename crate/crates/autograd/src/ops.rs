//! Forward operation builders. Each records one node on the tape and
//! returns a handle to it.
//!
//! Binary elementwise ops broadcast a scalar or a trailing-dimension row
//! vector against the other operand; anything fancier is rejected so the
//! backward rules stay simple.

use crate::error::{Result, TensorError};
use crate::tape::{mat_dims, map_flat, numel, trailing_dim, Op, Tape, Tensor, UnaryKind, LAYER_NORM_EPS};

/// Large negative score standing in for -inf in attention masks; keeps
/// softmax free of NaN from inf arithmetic.
pub const MASK_NEG: f64 = -1e30;

#[cfg(debug_assertions)]
fn debug_check_finite(op: &'static str, data: &[f64]) {
    for (i, v) in data.iter().enumerate() {
        assert!(
            v.is_finite(),
            "{op}: non-finite value {v} at flat index {i}"
        );
    }
}

#[cfg(not(debug_assertions))]
fn debug_check_finite(_op: &'static str, _data: &[f64]) {}

fn binary_shapes<'a>(
    op: &'static str,
    sa: &'a [usize],
    sb: &'a [usize],
    la: usize,
    lb: usize,
) -> Result<&'a [usize]> {
    if sa == sb {
        return Ok(sa);
    }
    if lb == 1 {
        return Ok(sa);
    }
    if la == 1 {
        return Ok(sb);
    }
    if sb.len() == 1 && lb == trailing_dim(sa) && sa.len() == 2 {
        return Ok(sa);
    }
    if sa.len() == 1 && la == trailing_dim(sb) && sb.len() == 2 {
        return Ok(sb);
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    })
}

impl Tape {
    fn binary(
        &mut self,
        op_name: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Tensor> {
        self.check_open()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (la, lb) = (self.data(a).len(), self.data(b).len());
        let out_shape = binary_shapes(op_name, &sa, &sb, la, lb)?.to_vec();
        let cols = trailing_dim(&out_shape);
        let n = numel(&out_shape);
        let mut out = vec![0.0; n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for (flat, slot) in out.iter_mut().enumerate() {
                *slot = f(
                    ad[map_flat(flat, la, &sa, cols)],
                    bd[map_flat(flat, lb, &sb, cols)],
                );
            }
        }
        Ok(self.push(make(a.id, b.id), out_shape, out))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// Division follows IEEE float semantics: dividing by zero yields
    /// infinities rather than an error.
    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("div", a, b, |x, y| x / y, |a, b| Op::Div { a, b })
    }

    fn unary(&mut self, a: Tensor, kind: UnaryKind, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        self.check_open()?;
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        Ok(self.push(Op::Unary { a: a.id, kind }, shape, out))
    }

    pub fn exp(&mut self, a: Tensor) -> Result<Tensor> {
        self.unary(a, UnaryKind::Exp, f64::exp)
    }

    /// Natural log. A non-positive input produces NaN/-inf; debug builds
    /// assert against that instead of propagating silently.
    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        #[cfg(debug_assertions)]
        for (i, v) in self.data(a).iter().enumerate() {
            assert!(*v > 0.0, "log: non-positive input {v} at flat index {i}");
        }
        self.unary(a, UnaryKind::Log, f64::ln)
    }

    pub fn tanh(&mut self, a: Tensor) -> Result<Tensor> {
        self.unary(a, UnaryKind::Tanh, f64::tanh)
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        self.unary(a, UnaryKind::Relu, |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Result<Tensor> {
        self.unary(a, UnaryKind::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn neg(&mut self, a: Tensor) -> Result<Tensor> {
        self.unary(a, UnaryKind::Neg, |x| -x)
    }

    pub fn sqrt(&mut self, a: Tensor) -> Result<Tensor> {
        self.unary(a, UnaryKind::Sqrt, f64::sqrt)
    }

    /// Multiply by a compile-time constant (no gradient for the constant).
    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        self.check_open()?;
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.data(a).iter().map(|&x| c * x).collect();
        Ok(self.push(Op::Scale { a: a.id, c }, shape, out))
    }

    /// Standard matrix product `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.check_open()?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            matmul_raw(ad, bd, m, k, n, &mut out);
        }
        Ok(self.push(Op::Matmul { a: a.id, b: b.id }, vec![m, n], out))
    }

    /// `a @ b^T` for `a: [m,k]`, `b: [n,k]`. The usual way to apply a
    /// weight matrix stored row-major as `[out_dim, in_dim]`.
    pub fn matmul_nt(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.check_open()?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for i in 0..m {
                let ar = &ad[i * k..(i + 1) * k];
                let or = &mut out[i * n..(i + 1) * n];
                for (j, slot) in or.iter_mut().enumerate() {
                    let br = &bd[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += ar[kk] * br[kk];
                    }
                    *slot = acc;
                }
            }
        }
        Ok(self.push(Op::MatmulNt { a: a.id, b: b.id }, vec![m, n], out))
    }

    /// Row-wise softmax over the last axis of a matrix. Rows sum to one.
    pub fn softmax_rows(&mut self, a: Tensor) -> Result<Tensor> {
        self.check_open()?;
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::NotAMatrix {
                op: "softmax_rows",
                shape,
            });
        }
        debug_check_finite("softmax_rows", self.data(a));
        let (rows, cols) = (shape[0], shape[1]);
        let mut out = vec![0.0; rows * cols];
        {
            let ad = self.data(a);
            for r in 0..rows {
                let row = &ad[r * cols..(r + 1) * cols];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let dst = &mut out[r * cols..(r + 1) * cols];
                let mut sum = 0.0;
                for (c, slot) in dst.iter_mut().enumerate() {
                    let e = (row[c] - max).exp();
                    *slot = e;
                    sum += e;
                }
                for slot in dst.iter_mut() {
                    *slot /= sum;
                }
            }
        }
        Ok(self.push(Op::SoftmaxRows { a: a.id }, shape, out))
    }

    /// Per-row standardization to zero mean and unit variance, then an
    /// affine transform with `gain` and `bias` row vectors.
    pub fn layer_norm_rows(&mut self, a: Tensor, gain: Tensor, bias: Tensor) -> Result<Tensor> {
        self.check_open()?;
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::NotAMatrix {
                op: "layer_norm_rows",
                shape,
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        for t in [gain, bias] {
            if self.data(t).len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm_rows",
                    lhs: shape.clone(),
                    rhs: self.shape(t).to_vec(),
                });
            }
        }
        debug_check_finite("layer_norm_rows", self.data(a));
        let mut out = vec![0.0; rows * cols];
        {
            let ad = self.data(a);
            let g = self.data(gain);
            let b = self.data(bias);
            for r in 0..rows {
                let row = &ad[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for c in 0..cols {
                    out[r * cols + c] = (row[c] - mean) * inv * g[c] + b[c];
                }
            }
        }
        Ok(self.push(
            Op::LayerNormRows {
                a: a.id,
                gain: gain.id,
                bias: bias.id,
            },
            shape,
            out,
        ))
    }

    pub fn sum_all(&mut self, a: Tensor) -> Result<Tensor> {
        self.check_open()?;
        let s: f64 = self.data(a).iter().sum();
        Ok(self.push(Op::SumAll { a: a.id }, vec![1], vec![s]))
    }

    pub fn mean_all(&mut self, a: Tensor) -> Result<Tensor> {
        self.check_open()?;
        let n = self.data(a).len();
        let s: f64 = self.data(a).iter().sum::<f64>() / n as f64;
        Ok(self.push(Op::MeanAll { a: a.id }, vec![1], vec![s]))
    }

    /// Sum a matrix over its columns, producing one value per row.
    pub fn sum_rows(&mut self, a: Tensor) -> Result<Tensor> {
        self.check_open()?;
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::NotAMatrix {
                op: "sum_rows",
                shape,
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut out = vec![0.0; rows];
        {
            let ad = self.data(a);
            for r in 0..rows {
                out[r] = ad[r * cols..(r + 1) * cols].iter().sum();
            }
        }
        Ok(self.push(Op::SumRows { a: a.id }, vec![rows], out))
    }

    /// Select rows by index (duplicates allowed); gradient scatter-adds.
    pub fn gather_rows(&mut self, a: Tensor, indices: &[usize]) -> Result<Tensor> {
        self.check_open()?;
        let (rows, cols) = mat_dims(self.shape(a));
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    rows,
                });
            }
        }
        let mut out = vec![0.0; indices.len() * cols];
        {
            let ad = self.data(a);
            for (r, &src) in indices.iter().enumerate() {
                out[r * cols..(r + 1) * cols].copy_from_slice(&ad[src * cols..(src + 1) * cols]);
            }
        }
        Ok(self.push(
            Op::GatherRows {
                a: a.id,
                indices: indices.to_vec(),
            },
            vec![indices.len(), cols],
            out,
        ))
    }

    pub fn slice_cols(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        self.check_open()?;
        let shape = self.shape(a).to_vec();
        let (rows, cols) = mat_dims(&shape);
        if start + len > cols {
            return Err(TensorError::ColumnRange {
                op: "slice_cols",
                start,
                end: start + len,
                cols,
            });
        }
        let mut out = vec![0.0; rows * len];
        {
            let ad = self.data(a);
            for r in 0..rows {
                out[r * len..(r + 1) * len]
                    .copy_from_slice(&ad[r * cols + start..r * cols + start + len]);
            }
        }
        Ok(self.push(
            Op::SliceCols {
                a: a.id,
                start,
                len,
            },
            vec![rows, len],
            out,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        self.check_open()?;
        assert!(!parts.is_empty(), "concat_cols: empty part list");
        let rows = mat_dims(self.shape(parts[0])).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = mat_dims(self.shape(p));
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += c;
        }
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = mat_dims(self.shape(p));
            let pd = self.data(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + c]
                    .copy_from_slice(&pd[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.iter().map(|t| t.id).collect(),
            },
            vec![rows, total],
            out,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        self.check_open()?;
        assert!(!parts.is_empty(), "concat_rows: empty part list");
        let cols = mat_dims(self.shape(parts[0])).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = mat_dims(self.shape(p));
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.iter().map(|t| t.id).collect(),
            },
            vec![rows, cols],
            out,
        ))
    }

    /// Scaled dot-product attention with an optional additive mask and an
    /// optional `(keys, values)` memory block prepended to the current
    /// segment. With no memory and a causal mask this is plain causal
    /// self-attention.
    pub fn masked_attention(
        &mut self,
        q: Tensor,
        k: Tensor,
        v: Tensor,
        mask: Option<Tensor>,
        memory: Option<(Tensor, Tensor)>,
    ) -> Result<Tensor> {
        let (keys, values) = match memory {
            Some((mk, mv)) => (self.concat_rows(&[mk, k])?, self.concat_rows(&[mv, v])?),
            None => (k, v),
        };
        let dh = mat_dims(self.shape(q)).1;
        let mut scores = self.matmul_nt(q, keys)?;
        scores = self.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = self.add(scores, m)?;
        }
        let attn = self.softmax_rows(scores)?;
        self.matmul(attn, values)
    }

    /// Constant additive mask for causal attention of `t` query positions
    /// over `mem_len` memory rows plus the `t` current rows: position `i`
    /// may attend to all memory and to current positions `<= i`.
    pub fn causal_mask(&mut self, t: usize, mem_len: usize) -> Result<Tensor> {
        let cols = mem_len + t;
        let mut data = vec![0.0; t * cols];
        for i in 0..t {
            for j in mem_len + i + 1..cols {
                data[i * cols + j] = MASK_NEG;
            }
        }
        self.leaf(data, &[t, cols])
    }

    /// Align a relative-distance table with absolute key positions:
    /// input `[t, r]` holds per-query scores indexed by distance, output
    /// `[t, t]` holds them indexed by key position, zero where the
    /// distance is negative or beyond the table.
    pub fn rel_shift(&mut self, a: Tensor) -> Result<Tensor> {
        self.check_open()?;
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::NotAMatrix {
                op: "rel_shift",
                shape,
            });
        }
        let (rows, rel) = (shape[0], shape[1]);
        let mut out = vec![0.0; rows * rows];
        {
            let ad = self.data(a);
            for i in 0..rows {
                for j in 0..=i {
                    let dist = i - j;
                    if dist < rel {
                        out[i * rows + j] = ad[i * rel + dist];
                    }
                }
            }
        }
        Ok(self.push(Op::RelShift { a: a.id }, vec![rows, rows], out))
    }
}

/// Plain `[m,k] @ [k,n]` into `out`, accumulating in ascending-k order so
/// results are bit-identical to a per-row dot product.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    for v in out.iter_mut() {
        *v = 0.0;
    }
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in ar.iter().enumerate() {
            let br = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
}
