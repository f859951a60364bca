//! Dynamically recorded computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value plus whatever the
//! backward rule needs (attention probabilities, normalized activations, ...).
//! Nodes are only ever appended, so node order is a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;

use super::{gemm, MatRef, ParamId, ParamStore, Result, Tensor, TensorError, LAYER_NORM_EPS};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    ConcatRows(Vec<Var>),
    Rows {
        x: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass. Build one per example, call [`Graph::backward`]
/// once, harvest gradients, then drop it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by forward values and backward caches; a deterministic
    /// stand-in for the transient memory of one forward pass.
    pub fn allocated_bytes(&self) -> usize {
        let cached: usize = self
            .nodes
            .iter()
            .map(|n| match &n.op {
                Op::LayerNorm { normalized, rstd, .. } => normalized.len() + rstd.len(),
                Op::Attention { probs, .. } | Op::CrossEntropy { probs, .. } => probs.len(),
                _ => 0,
            })
            .sum();
        let values: usize = self.nodes.iter().map(|n| n.value.numel()).sum();
        (values + cached) * std::mem::size_of::<f64>()
    }

    /// A constant: gradients never flow into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free variable whose gradient is recorded by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a stored parameter into the graph; repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, !p.frozen);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_rank("matmul", 2)?;
        bv.expect_rank("matmul", 2)?;
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let n = bv.shape()[1];
        if bv.shape()[0] != k {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::row_major(av.data(), k),
            MatRef::row_major(bv.data(), n),
            &mut out,
            false,
        );
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `r × n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        bv.expect_rank("add_bias", 1)?;
        let n = bv.numel();
        if xv.rank() == 0 || xv.cols() != n {
            return Err(mismatch("add_bias", xv, bv));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape(), data)?;
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.requires(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.requires(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(TensorError::InvalidAxis {
                axis,
                shape: xv.shape().to_vec(),
            });
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        gv.expect_rank("layer_norm", 1)?;
        let n = gv.numel();
        if xv.rank() == 0 || xv.cols() != n {
            return Err(mismatch("layer_norm", xv, gv));
        }
        if bv.shape() != gv.shape() {
            return Err(mismatch("layer_norm", gv, bv));
        }
        let rows = xv.numel() / n.max(1);
        let mut normalized = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                normalized[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries, keys and values. Each head uses a `d / heads` column slice and
    /// the scale `1 / sqrt(d / heads)`. With `causal`, query `i` only sees
    /// keys `0..=i` (requires `Tq == Tk`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        qv.expect_rank("attention", 2)?;
        kv.expect_rank("attention", 2)?;
        vv.expect_rank("attention", 2)?;
        let (tq, d) = (qv.rows(), qv.cols());
        let tk = kv.rows();
        if kv.cols() != d {
            return Err(mismatch("attention", qv, kv));
        }
        if vv.shape() != kv.shape() {
            return Err(mismatch("attention", kv, vv));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        if tq == 0 || tk == 0 {
            return Err(TensorError::Config(format!(
                "attention needs at least one query and one key (got {tq} and {tk})"
            )));
        }
        if causal && tq != tk {
            return Err(TensorError::Config(format!(
                "causal attention needs equal query and key lengths (got {tq} and {tk})"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * d];
        let mut head_out = vec![0.0; tq * dh];
        for h in 0..heads {
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            gemm(
                tq,
                dh,
                tk,
                MatRef::row_major(qv.data(), d).with_offset(h * dh),
                MatRef::transposed(kv.data(), d).with_offset(h * dh),
                p,
                false,
            );
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                let visible = if causal { i + 1 } else { tk };
                let mut max = f64::NEG_INFINITY;
                for s in &mut row[..visible] {
                    *s *= scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in &mut row[..visible] {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in &mut row[..visible] {
                    *s /= sum;
                }
                row[visible..].fill(0.0);
            }
            gemm(
                tq,
                tk,
                dh,
                MatRef::row_major(p, tk),
                MatRef::row_major(vv.data(), d).with_offset(h * dh),
                &mut head_out,
                false,
            );
            for i in 0..tq {
                out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&head_out[i * dh..(i + 1) * dh]);
            }
        }
        let value = Tensor::new(&[tq, d], out)?;
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        lv.expect_rank("cross_entropy", 2)?;
        let (t, vocab) = (lv.rows(), lv.cols());
        if targets.len() != t || mask.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::AllMasked);
        }
        let mut probs = vec![0.0; t * vocab];
        let mut total = 0.0;
        for r in 0..t {
            if !mask[r] {
                continue;
            }
            if targets[r] >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    index: targets[r],
                    len: vocab,
                });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[targets[r]];
            for (p, x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let value = Tensor::scalar(total / count as f64);
        let rg = self.requires(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Stacks 2-D values with a common column count; zero-row parts are allowed.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Config("concat_rows needs at least one part".into()));
        }
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&values)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Gathers rows of a 2-D value; also serves as embedding lookup.
    pub fn rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_rank("rows", 2)?;
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(TensorError::IndexOutOfRange { index: i, len: r });
            }
            data.extend_from_slice(xv.row(i));
        }
        let value = Tensor::new(&[indices.len(), c], data)?;
        let rg = self.requires(x);
        Ok(self.push(
            value,
            Op::Rows {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `loss`. Afterwards [`Graph::grad`] and
    /// [`Graph::param_grads`] expose the gradients; a second call recomputes
    /// them from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Convenience: backward plus accumulation into the store.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?;
        store.accumulate(self);
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params.iter().filter_map(|(&id, &v)| {
            if !self.nodes[v.0].requires_grad {
                return None;
            }
            self.grad(v).map(|g| (id, g))
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires(*a) {
                    let ga = add_into(grads, *a, m * k);
                    gemm(m, n, k, MatRef::row_major(g, n), MatRef::transposed(bv.data(), n), ga, true);
                }
                if self.requires(*b) {
                    let gb = add_into(grads, *b, k * n);
                    gemm(k, m, n, MatRef::transposed(av.data(), k), MatRef::row_major(g, n), gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires(v) {
                        for (acc, x) in add_into(grads, v, g.len()).iter_mut().zip(g) {
                            *acc += x;
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                if self.requires(*x) {
                    for (acc, v) in add_into(grads, *x, g.len()).iter_mut().zip(g) {
                        *acc += v;
                    }
                }
                if self.requires(*b) {
                    let n = self.value(*b).numel();
                    let gb = add_into(grads, *b, n);
                    for row in g.chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires(*a) {
                    for ((acc, x), y) in add_into(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *acc += x * y;
                    }
                }
                if self.requires(*b) {
                    for ((acc, x), y) in add_into(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *acc += x * y;
                    }
                }
            }
            Op::Scale(a, factor) => {
                for (acc, x) in add_into(grads, *a, g.len()).iter_mut().zip(g) {
                    *acc += x * factor;
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                for ((acc, x), &inp) in add_into(grads, *a, g.len()).iter_mut().zip(g).zip(av) {
                    *acc += x * gelu_grad(inp);
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let gx = add_into(grads, *x, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                let rows = rstd.len();
                if self.requires(*gain) {
                    let gg = add_into(grads, *gain, n);
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * normalized[r * n + j];
                        }
                    }
                }
                if self.requires(*bias) {
                    let gb = add_into(grads, *bias, n);
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += g[r * n + j];
                        }
                    }
                }
                if self.requires(*x) {
                    let gx = add_into(grads, *x, rows * n);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let h = &normalized[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            dxhat[j] = g[r * n + j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * h[j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for j in 0..n {
                            gx[r * n + j] += rstd[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                let gl = add_into(grads, *logits, mask.len() * vocab);
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..vocab {
                        gl[r * vocab + j] += scale * probs[r * vocab + j];
                    }
                    gl[r * vocab + targets[r]] -= scale;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.requires(p) {
                        for (acc, x) in add_into(grads, p, len).iter_mut().zip(&g[offset..offset + len]) {
                            *acc += x;
                        }
                    }
                    offset += len;
                }
            }
            Op::Rows { x, indices } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let gx = add_into(grads, *x, xv.numel());
                for (r, &src) in indices.iter().enumerate() {
                    for j in 0..c {
                        gx[src * c + j] += g[r * c + j];
                    }
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).numel();
                for acc in add_into(grads, *x, len) {
                    *acc += g[0];
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = (qv.rows(), qv.cols());
        let tk = kv.rows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (need_q, need_k, need_v) = (self.requires(q), self.requires(k), self.requires(v));
        let mut d_out = vec![0.0; tq * dh];
        let mut d_probs = vec![0.0; tq * tk];
        let mut tmp_q = vec![0.0; tq * dh];
        let mut tmp_k = vec![0.0; tk * dh];
        for h in 0..heads {
            let p = &probs[h * tq * tk..(h + 1) * tq * tk];
            for i in 0..tq {
                d_out[i * dh..(i + 1) * dh].copy_from_slice(&g[i * d + h * dh..i * d + (h + 1) * dh]);
            }
            if need_v {
                gemm(tk, tq, dh, MatRef::transposed(p, tk), MatRef::row_major(&d_out, dh), &mut tmp_k, false);
                let gv = add_into(grads, v, tk * d);
                for j in 0..tk {
                    for c in 0..dh {
                        gv[j * d + h * dh + c] += tmp_k[j * dh + c];
                    }
                }
            }
            if !(need_q || need_k) {
                continue;
            }
            gemm(
                tq,
                dh,
                tk,
                MatRef::row_major(&d_out, dh),
                MatRef::transposed(vv.data(), d).with_offset(h * dh),
                &mut d_probs,
                false,
            );
            for i in 0..tq {
                let pr = &p[i * tk..(i + 1) * tk];
                let dr = &mut d_probs[i * tk..(i + 1) * tk];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (dv, pv) in dr.iter_mut().zip(pr) {
                    *dv = pv * (*dv - dot) * scale;
                }
            }
            if need_q {
                gemm(
                    tq,
                    tk,
                    dh,
                    MatRef::row_major(&d_probs, tk),
                    MatRef::row_major(kv.data(), d).with_offset(h * dh),
                    &mut tmp_q,
                    false,
                );
                let gq = add_into(grads, q, tq * d);
                for i in 0..tq {
                    for c in 0..dh {
                        gq[i * d + h * dh + c] += tmp_q[i * dh + c];
                    }
                }
            }
            if need_k {
                gemm(
                    tk,
                    tq,
                    dh,
                    MatRef::transposed(&d_probs, tk),
                    MatRef::row_major(qv.data(), d).with_offset(h * dh),
                    &mut tmp_k,
                    false,
                );
                let gk = add_into(grads, k, tk * d);
                for j in 0..tk {
                    for c in 0..dh {
                        gk[j * d + h * dh + c] += tmp_k[j * dh + c];
                    }
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
