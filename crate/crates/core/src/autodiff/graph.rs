use super::kernels::{axpy, dot, gemm_acc, gemm_acc_at, gemm_acc_bt, split_axis};
use super::{Scalar, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBroadcast(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    InstanceNorm {
        x: Var,
        lens: Vec<usize>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    WeightedSum(Var, Vec<T>),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Unfold {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
        lens: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_lens: Vec<usize>,
        causal: bool,
        probs: Vec<T>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ReplaceRows {
        x: Var,
        token: Var,
        mask: Vec<bool>,
    },
    Nll {
        logp: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
    },
    RowJacobian {
        x: Var,
        jac: Vec<T>,
    },
    CosineRows {
        a: Var,
        b: Var,
        na: Vec<T>,
        nb: Vec<T>,
    },
}

/// Tape of operations.
///
/// Nodes are appended in creation order; backward visits them in exact
/// reverse. A graph can be differentiated once.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const IN_EPS: f64 = 1e-6;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `Σ cᵢ·xᵢ` over same-shaped inputs.
    pub fn linear_combination(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let (first, rest) = terms.split_first().ok_or(TensorError::Empty("linear_combination"))?;
        let mut acc = self.scale(first.0, first.1);
        for &(v, c) in rest {
            let s = self.scale(v, c);
            acc = self.add(acc, s)?;
        }
        Ok(acc)
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias rows, position tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::Shape {
                op: "add_broadcast",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let tb = self.value(b).data();
        let inner = tb.len().max(1);
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &x) in chunk.iter_mut().zip(tb) {
                *o += x;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    /// `a[.., M, K] · b[K, N]` or `a[.., M, K] · b[.., K, N]` with equal batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || TensorError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_b = batch_b.is_empty();
        if !shared_b && batch_a != batch_b {
            return Err(err());
        }
        let batch: usize = batch_a.iter().product();
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::ZERO; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            if shared_b {
                gemm_acc(da, db, &mut out, batch * m, k, n);
            } else {
                for bi in 0..batch {
                    gemm_acc(
                        &da[bi * m * k..(bi + 1) * m * k],
                        &db[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        ))
    }

    /// `x·W + b` with `W[K, N]`, `b[N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_broadcast(y, b)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape(), tx.data().iter().map(|&v| gelu(v)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(TensorError::Axis {
                op,
                axis,
                shape: self.shape(x).to_vec(),
            });
        }
        Ok(())
    }

    fn check_finite(&self, op: &'static str, x: Var) -> Result<()> {
        if self.value(x).data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        self.check_finite("softmax", x)?;
        let out = softmax_along(self.value(x), axis, false);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        self.check_finite("log_softmax", x)?;
        let out = softmax_along(self.value(x), axis, true);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax { x, axis }, rg))
    }

    /// Layer normalisation over the last axis, `eps = 1e-5`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or(TensorError::Empty("layer_norm"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: sx,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let eps = T::of(LN_EPS);
        let dt = T::of(d as f64);
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d.max(1);
        let mut xhat = vec![T::ZERO; xv.len()];
        let mut rstd = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(&sx, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Per-channel normalisation across time for `[T, C]` or `[N, T, C]`,
    /// `eps = 1e-6`.
    /// With `lens`, only the first `lens[n]` frames of sample `n` take part;
    /// the remaining rows are zero.
    pub fn instance_norm(&mut self, x: Var, lens: Option<&[usize]>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (n, t, c) = match sx.len() {
            2 => (1, sx[0], sx[1]),
            3 => (sx[0], sx[1], sx[2]),
            _ => {
                return Err(TensorError::Invalid {
                    op: "instance_norm",
                    msg: format!("expected [T, C] or [N, T, C], got {sx:?}"),
                })
            }
        };
        let lens: Vec<usize> = match lens {
            Some(l) if l.len() == n && l.iter().all(|&v| v <= t) => l.to_vec(),
            Some(_) => {
                return Err(TensorError::Invalid {
                    op: "instance_norm",
                    msg: "lengths do not match batch".into(),
                })
            }
            None => vec![t; n],
        };
        if t == 0 || lens.contains(&0) {
            return Err(TensorError::Empty("instance_norm"));
        }
        let eps = T::of(IN_EPS);
        let xv = self.value(x).data();
        let mut xhat = vec![T::ZERO; xv.len()];
        let mut rstd = vec![T::ZERO; n * c];
        for s in 0..n {
            let len = lens[s];
            let lt = T::of(len as f64);
            let base = s * t * c;
            for ch in 0..c {
                let mut mean = T::ZERO;
                for ti in 0..len {
                    mean += xv[base + ti * c + ch];
                }
                mean = mean / lt;
                let mut var = T::ZERO;
                for ti in 0..len {
                    let dv = xv[base + ti * c + ch] - mean;
                    var += dv * dv;
                }
                var = var / lt;
                let rs = T::ONE / (var + eps).sqrt();
                rstd[s * c + ch] = rs;
                for ti in 0..len {
                    xhat[base + ti * c + ch] = (xv[base + ti * c + ch] - mean) * rs;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&sx, xhat.clone())?,
            Op::InstanceNorm {
                x,
                lens,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `Σ wᵢ·xᵢ` over all elements.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(TensorError::Shape {
                op: "weighted_sum",
                lhs: self.shape(x).to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let mut s = T::ZERO;
        for (&v, &w) in self.value(x).data().iter().zip(&weights) {
            if w != T::ZERO {
                s += v * w;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(TensorError::Empty("concat"))?;
        self.check_axis("concat", first, axis)?;
        let s0 = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != s0.len()
                || s[..axis] != s0[..axis]
                || s[axis + 1..] != s0[axis + 1..]
            {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: s0,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out_shape = s0.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let tv = self.value(v);
                let len = tv.shape()[axis] * inner;
                out.extend_from_slice(&tv.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let sx = self.shape(x).to_vec();
        if start + len > sx[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} exceeds axis {axis} of {sx:?}", start + len),
            });
        }
        let (outer, alen, inner) = split_axis(&sx, axis);
        let mut out_shape = sx.clone();
        out_shape[axis] = len;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Temporal patch extraction for 1-D convolution: `[N, T, C]` to
    /// `[N, T_out, kernel·C]` with `T_out = (T + 2·pad − kernel)/stride + 1`.
    /// Frames at or beyond `lens[n]` read as zero.
    pub fn unfold(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
        lens: &[usize],
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || kernel == 0 || stride == 0 || lens.len() != sx[0] {
            return Err(TensorError::Invalid {
                op: "unfold",
                msg: format!("shape {sx:?}, kernel {kernel}, stride {stride}"),
            });
        }
        let (n, t, c) = (sx[0], sx[1], sx[2]);
        if t + 2 * pad < kernel {
            return Err(TensorError::Invalid {
                op: "unfold",
                msg: "sequence shorter than kernel".into(),
            });
        }
        let t_out = (t + 2 * pad - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; n * t_out * kernel * c];
        for s in 0..n {
            for to in 0..t_out {
                for j in 0..kernel {
                    let src = (to * stride + j) as isize - pad as isize;
                    if src < 0 || src as usize >= lens[s].min(t) {
                        continue;
                    }
                    let src = src as usize;
                    let dst = ((s * t_out + to) * kernel + j) * c;
                    out[dst..dst + c].copy_from_slice(&xv[(s * t + src) * c..(s * t + src + 1) * c]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&[n, t_out, kernel * c], out)?,
            Op::Unfold {
                x,
                kernel,
                stride,
                pad,
                lens: lens.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over pre-projected
    /// `q[N, Tq, D]`, `k[N, Tk, D]`, `v[N, Tk, D]`. Only the first
    /// `key_lens[n]` keys are visible; with `causal`, query `i` also sees
    /// only keys `j ≤ i`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_lens: &[usize],
        causal: bool,
    ) -> Result<Var> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 3 || sk != sv || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: sq,
                rhs: sk,
            });
        }
        let (n, tq, d) = (sq[0], sq[1], sq[2]);
        let tk = sk[1];
        if heads == 0 || d % heads != 0 || key_lens.len() != n {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("dim {d} not divisible into {heads} heads or bad key lengths"),
            });
        }
        let dh = d / heads;
        let scale = T::ONE / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::ZERO; n * heads * tq * tk];
        let mut out = vec![T::ZERO; n * tq * d];
        let mut scores = vec![T::ZERO; tk];
        for s in 0..n {
            let kl = key_lens[s].min(tk);
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let visible = if causal { kl.min(i + 1) } else { kl };
                    if visible == 0 {
                        continue;
                    }
                    let qi = &qv[(s * tq + i) * d + off..(s * tq + i) * d + off + dh];
                    let mut mx = T::neg_infinity();
                    for j in 0..visible {
                        let kj = &kv[(s * tk + j) * d + off..(s * tk + j) * d + off + dh];
                        let sc = dot(qi, kj) * scale;
                        scores[j] = sc;
                        mx = mx.max(sc);
                    }
                    let mut z = T::ZERO;
                    for sc in scores.iter_mut().take(visible) {
                        *sc = (*sc - mx).exp();
                        z += *sc;
                    }
                    let prow = &mut probs[((s * heads + h) * tq + i) * tk..][..tk];
                    let orow = &mut out[(s * tq + i) * d + off..(s * tq + i) * d + off + dh];
                    for j in 0..visible {
                        let p = scores[j] / z;
                        prow[j] = p;
                        let vj = &vv[(s * tk + j) * d + off..(s * tk + j) * d + off + dh];
                        axpy(p, vj, orow);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(&[n, tq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                key_lens: key_lens.to_vec(),
                causal,
                probs,
            },
            rg,
        ))
    }

    /// Row lookup: `table[V, D]` indexed by `ids` gives `[ids.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || ids.iter().any(|&i| i >= st[0]) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("ids out of range for table {st:?}"),
            });
        }
        let d = st[1];
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Replaces every row of `x[.., D]` whose mask entry is set by `token[D]`.
    pub fn replace_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or(TensorError::Empty("replace_rows"))?;
        let rows = self.value(x).numel() / d.max(1);
        if self.shape(token) != [d] || mask.len() != rows {
            return Err(TensorError::Shape {
                op: "replace_rows",
                lhs: sx,
                rhs: self.shape(token).to_vec(),
            });
        }
        let mut out = self.value(x).clone();
        let tok = self.value(token).data().to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&tok);
            }
        }
        let rg = self.rg(&[x, token]);
        Ok(self.push(
            out,
            Op::ReplaceRows {
                x,
                token,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Weighted negative log-likelihood `Σ_r w_r · (−logp[r, target_r])` with
    /// `logp` viewed as `[rows, V]`. Rows with zero weight are ignored.
    pub fn nll(&mut self, logp: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let sl = self.shape(logp).to_vec();
        let vsz = *sl.last().ok_or(TensorError::Empty("nll"))?;
        let rows = self.value(logp).numel() / vsz.max(1);
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::Shape {
                op: "nll",
                lhs: sl,
                rhs: vec![targets.len()],
            });
        }
        let lv = self.value(logp).data();
        let mut s = T::ZERO;
        for r in 0..rows {
            if weights[r] == T::ZERO {
                continue;
            }
            if targets[r] >= vsz {
                return Err(TensorError::Invalid {
                    op: "nll",
                    msg: format!("target {} outside vocabulary {vsz}", targets[r]),
                });
            }
            s -= weights[r] * lv[r * vsz + targets[r]];
        }
        let rg = self.rg(&[logp]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Nll {
                logp,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row values `y[r]` of an externally computed function of row block
    /// `x[r, ..]`, together with its gradient `jac[r, ..] = ∂y[r]/∂x[r, ..]`.
    pub fn row_function(&mut self, x: Var, values: Vec<T>, jac: Vec<T>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || sx[0] != values.len() || jac.len() != self.value(x).numel() {
            return Err(TensorError::Shape {
                op: "row_function",
                lhs: sx,
                rhs: vec![values.len()],
            });
        }
        let rg = self.rg(&[x]);
        let n = values.len();
        Ok(self.push(Tensor::new(&[n], values)?, Op::RowJacobian { x, jac }, rg))
    }

    /// Row-wise cosine similarity of `a[.., D]` and `b[.., D]`; rows where
    /// either vector has zero norm give 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let sa = self.shape(a).to_vec();
        let d = *sa.last().ok_or(TensorError::Empty("cosine_rows"))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let rows = av.len() / d.max(1);
        let mut na = vec![T::ZERO; rows];
        let mut nb = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; rows];
        for r in 0..rows {
            let (ra, rb) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
            na[r] = dot(ra, ra).sqrt();
            nb[r] = dot(rb, rb).sqrt();
            if na[r] > T::ZERO && nb[r] > T::ZERO {
                out[r] = dot(ra, rb) / (na[r] * nb[r]);
            }
        }
        let rg = self.rg(&[a, b]);
        let out_shape = sa[..sa.len() - 1].to_vec();
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::CosineRows { a, b, na, nb }, rg))
    }

    /// Reverse pass from a scalar `loss`. Gradients are accumulated, so
    /// nodes consumed several times receive the sum of all contributions.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g);
            // Intermediate gradients are kept for inspection.
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of a node after [`Graph::backward`]. Differentiable nodes
    /// not connected to the loss receive zeros; constants receive `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        if !self.nodes[v.0].requires_grad || !self.backward_done {
            return None;
        }
        let shape = self.shape(v);
        Some(match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        })
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::ZERO; n]))
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // Take the op out so input values and gradient buffers can be
        // borrowed independently; restored at the end.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(buf) = self.grad_buf(v) {
                        add_into(buf, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(buf) = self.grad_buf(*a) {
                    add_into(buf, g);
                }
                if let Some(buf) = self.grad_buf(*b) {
                    for (o, &x) in buf.iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                if let Some(buf) = self.grad_buf(*a) {
                    for ((o, &x), &y) in buf.iter_mut().zip(g).zip(&bv) {
                        *o += x * y;
                    }
                }
                if let Some(buf) = self.grad_buf(*b) {
                    for ((o, &x), &y) in buf.iter_mut().zip(g).zip(&av) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(buf) = self.grad_buf(*a) {
                    for (o, &x) in buf.iter_mut().zip(g) {
                        *o += x * c;
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if let Some(buf) = self.grad_buf(*a) {
                    add_into(buf, g);
                }
                if let Some(buf) = self.grad_buf(*b) {
                    let inner = buf.len().max(1);
                    for chunk in g.chunks(inner) {
                        add_into(buf, chunk);
                    }
                }
            }
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let buf = self.grad_buf(a).expect("requires grad");
                    if shared_b {
                        gemm_acc_bt(g, &bv, buf, batch * m, k, n);
                    } else {
                        for bi in 0..batch {
                            gemm_acc_bt(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bv[bi * k * n..(bi + 1) * k * n],
                                &mut buf[bi * m * k..(bi + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let buf = self.grad_buf(b).expect("requires grad");
                    if shared_b {
                        gemm_acc_at(&av, g, buf, batch * m, k, n);
                    } else {
                        for bi in 0..batch {
                            gemm_acc_at(
                                &av[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut buf[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.data().to_vec();
                if let Some(buf) = self.grad_buf(*x) {
                    for ((o, &gy), &v) in buf.iter_mut().zip(g).zip(&xv) {
                        *o += gy * gelu_grad(v);
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.clone();
                if let Some(buf) = self.grad_buf(x) {
                    let (outer, len, inner) = split_axis(y.shape(), axis);
                    let yv = y.data();
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + ii;
                            let s: T = (0..len).map(|j| g[idx(j)] * yv[idx(j)]).sum();
                            for j in 0..len {
                                buf[idx(j)] += yv[idx(j)] * (g[idx(j)] - s);
                            }
                        }
                    }
                }
            }
            &Op::LogSoftmax { x, axis } => {
                let y = self.nodes[i].value.clone();
                if let Some(buf) = self.grad_buf(x) {
                    let (outer, len, inner) = split_axis(y.shape(), axis);
                    let yv = y.data();
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + ii;
                            let s: T = (0..len).map(|j| g[idx(j)]).sum();
                            for j in 0..len {
                                buf[idx(j)] += g[idx(j)] - yv[idx(j)].exp() * s;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.nodes[gain.0].value.numel();
                let gv = self.nodes[gain.0].value.data().to_vec();
                if let Some(buf) = self.grad_buf(*x) {
                    let dt = T::of(d as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 = m1 / dt;
                        m2 = m2 / dt;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            buf[r * d + j] += rs * (dh - m1 - hr[j] * m2);
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(*gain) {
                    for (r, _) in rstd.iter().enumerate() {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(*bias) {
                    for chunk in g.chunks(d) {
                        add_into(buf, chunk);
                    }
                }
            }
            Op::InstanceNorm {
                x,
                lens,
                xhat,
                rstd,
            } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (t, c) = (sx[sx.len() - 2], sx[sx.len() - 1]);
                if let Some(buf) = self.grad_buf(*x) {
                    for (s, &len) in lens.iter().enumerate() {
                        let lt = T::of(len as f64);
                        let base = s * t * c;
                        for ch in 0..c {
                            let rs = rstd[s * c + ch];
                            let mut m1 = T::ZERO;
                            let mut m2 = T::ZERO;
                            for ti in 0..len {
                                let idx = base + ti * c + ch;
                                m1 += g[idx];
                                m2 += g[idx] * xhat[idx];
                            }
                            m1 = m1 / lt;
                            m2 = m2 / lt;
                            for ti in 0..len {
                                let idx = base + ti * c + ch;
                                buf[idx] += rs * (g[idx] - m1 - xhat[idx] * m2);
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                if let Some(buf) = self.grad_buf(*x) {
                    for o in buf.iter_mut() {
                        *o += g0;
                    }
                }
            }
            Op::WeightedSum(x, w) => {
                let g0 = g[0];
                if let Some(buf) = self.grad_buf(*x) {
                    for (o, &wi) in buf.iter_mut().zip(w) {
                        *o += g0 * wi;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    if let Some(buf) = self.grad_buf(v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut buf[o * len * inner..(o + 1) * len * inner], src);
                        }
                    }
                    offset += len;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let len = self.nodes[i].value.shape()[axis];
                if let Some(buf) = self.grad_buf(x) {
                    let (outer, alen, inner) = split_axis(&sx, axis);
                    for o in 0..outer {
                        let base = o * alen * inner + start * inner;
                        add_into(
                            &mut buf[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(buf) = self.grad_buf(*x) {
                    add_into(buf, g);
                }
            }
            Op::Unfold {
                x,
                kernel,
                stride,
                pad,
                lens,
            } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let t_out = self.nodes[i].value.shape()[1];
                let (n, t, c) = (sx[0], sx[1], sx[2]);
                if let Some(buf) = self.grad_buf(*x) {
                    for s in 0..n {
                        for to in 0..t_out {
                            for j in 0..*kernel {
                                let src = (to * stride + j) as isize - *pad as isize;
                                if src < 0 || src as usize >= lens[s].min(t) {
                                    continue;
                                }
                                let src = src as usize;
                                let from = ((s * t_out + to) * kernel + j) * c;
                                add_into(
                                    &mut buf[(s * t + src) * c..(s * t + src + 1) * c],
                                    &g[from..from + c],
                                );
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                key_lens,
                causal,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, key_lens, *causal, probs),
            Op::GatherRows { table, ids } => {
                let d = self.nodes[table.0].value.shape()[1];
                if let Some(buf) = self.grad_buf(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ReplaceRows { x, token, mask } => {
                let d = self.nodes[token.0].value.numel();
                if let Some(buf) = self.grad_buf(*x) {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            add_into(&mut buf[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(*token) {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            add_into(buf, &g[r * d..(r + 1) * d]);
                        }
                    }
                }
            }
            Op::Nll {
                logp,
                targets,
                weights,
            } => {
                let vsz = *self.nodes[logp.0].value.shape().last().expect("non-scalar");
                let g0 = g[0];
                if let Some(buf) = self.grad_buf(*logp) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w != T::ZERO {
                            buf[r * vsz + t] -= g0 * w;
                        }
                    }
                }
            }
            Op::RowJacobian { x, jac } => {
                let rows = g.len();
                if let Some(buf) = self.grad_buf(*x) {
                    let block = buf.len() / rows.max(1);
                    for (r, &gr) in g.iter().enumerate() {
                        if gr == T::ZERO {
                            continue;
                        }
                        axpy(gr, &jac[r * block..(r + 1) * block], &mut buf[r * block..(r + 1) * block]);
                    }
                }
            }
            Op::CosineRows { a, b, na, nb } => {
                let d = *self.nodes[a.0].value.shape().last().expect("non-scalar");
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                let cos = self.nodes[i].value.data().to_vec();
                for (x, xv, y, nx, ny) in [(*a, &av, &bv, na, nb), (*b, &bv, &av, nb, na)] {
                    if let Some(buf) = self.grad_buf(x) {
                        for r in 0..g.len() {
                            if nx[r] == T::ZERO || ny[r] == T::ZERO {
                                continue;
                            }
                            let c1 = g[r] / (nx[r] * ny[r]);
                            let c2 = g[r] * cos[r] / (nx[r] * nx[r]);
                            for j in 0..d {
                                buf[r * d + j] += c1 * y[r * d + j] - c2 * xv[r * d + j];
                            }
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_lens: &[usize],
        causal: bool,
        probs: &[T],
    ) {
        let sq = self.nodes[q.0].value.shape().to_vec();
        let tk = self.nodes[k.0].value.shape()[1];
        let (n, tq, d) = (sq[0], sq[1], sq[2]);
        let dh = d / heads;
        let scale = T::ONE / T::of(dh as f64).sqrt();
        let qv = self.nodes[q.0].value.data().to_vec();
        let kv = self.nodes[k.0].value.data().to_vec();
        let vv = self.nodes[v.0].value.data().to_vec();
        let mut dq = vec![T::ZERO; qv.len()];
        let mut dk = vec![T::ZERO; kv.len()];
        let mut dv = vec![T::ZERO; vv.len()];
        let mut ds = vec![T::ZERO; tk];
        for s in 0..n {
            let kl = key_lens[s].min(tk);
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let visible = if causal { kl.min(i + 1) } else { kl };
                    if visible == 0 {
                        continue;
                    }
                    let prow = &probs[((s * heads + h) * tq + i) * tk..][..tk];
                    let go = &g[(s * tq + i) * d + off..(s * tq + i) * d + off + dh];
                    let mut acc = T::ZERO;
                    for j in 0..visible {
                        let vj = &vv[(s * tk + j) * d + off..(s * tk + j) * d + off + dh];
                        let dp = dot(go, vj);
                        ds[j] = dp;
                        acc += prow[j] * dp;
                        axpy(prow[j], go, &mut dv[(s * tk + j) * d + off..(s * tk + j) * d + off + dh]);
                    }
                    let qi = &qv[(s * tq + i) * d + off..(s * tq + i) * d + off + dh];
                    for j in 0..visible {
                        let dsc = prow[j] * (ds[j] - acc) * scale;
                        if dsc == T::ZERO {
                            continue;
                        }
                        let kj = &kv[(s * tk + j) * d + off..(s * tk + j) * d + off + dh];
                        axpy(dsc, kj, &mut dq[(s * tq + i) * d + off..(s * tq + i) * d + off + dh]);
                        axpy(dsc, qi, &mut dk[(s * tk + j) * d + off..(s * tk + j) * d + off + dh]);
                    }
                }
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(buf) = self.grad_buf(var) {
                add_into(buf, &grad);
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::ONE + T::of(3.0) * a * x * x);
    half * (T::ONE + th) + half * x * (T::ONE - th * th) * du
}

/// Max-subtracted softmax (or log-softmax) along `axis`.
pub(crate) fn softmax_along<T: Scalar>(x: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let xv = x.data();
    let mut out = vec![T::ZERO; xv.len()];
    for o in 0..outer {
        for ii in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + ii;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(xv[idx(j)]);
            }
            let mut z = T::ZERO;
            for j in 0..len {
                z += (xv[idx(j)] - mx).exp();
            }
            if log {
                let lz = z.ln();
                for j in 0..len {
                    out[idx(j)] = xv[idx(j)] - mx - lz;
                }
            } else {
                for j in 0..len {
                    out[idx(j)] = (xv[idx(j)] - mx).exp() / z;
                }
            }
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}
