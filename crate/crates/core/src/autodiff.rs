//! Define-by-run reverse-mode differentiation over whole tensors.
//!
//! Every operation appends a node to a [`Tape`]; node inputs always precede
//! the node, so a single reverse sweep in index order visits each node once.
//! Leaves created with `requires_grad = false` act as constants: gradient
//! flows *through* operations that consume them but is never accumulated
//! for them, which is how frozen weights are handled.

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{self, axis_split, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sum(Var),
    Dot(Var, Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Reshape(Var),
    Rope {
        x: Var,
        n_heads: usize,
        base: f64,
        offset: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::shape(op, s, &[])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let g = self.grad_any(&[a]);
        Ok(self.push(value, Op::Transpose(a), g))
    }

    /// Elementwise sum; `b` may also be a 1-D bias matching `a`'s trailing axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let g = self.grad_any(&[a, b]);
        if sa == sb {
            let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
            let value = Tensor::new(sa.to_vec(), data)?;
            return Ok(self.push(value, Op::Add(a, b), g));
        }
        if sb.len() == 1 && sb[0] == *sa.last().unwrap() {
            let bias = self.value(b).data();
            let mut data = self.value(a).data().to_vec();
            for row in data.chunks_mut(bias.len()) {
                for (x, &bv) in row.iter_mut().zip(bias) {
                    *x += bv;
                }
            }
            let value = Tensor::new(sa.to_vec(), data)?;
            return Ok(self.push(value, Op::AddBias(a, b), g));
        }
        Err(Error::shape("add", sa, sb))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect()).expect("shape preserved");
        let g = self.grad_any(&[a]);
        self.push(value, Op::Scale(a, c), g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| tensor::silu(x)).collect())
            .expect("shape preserved");
        let g = self.grad_any(&[a]);
        self.push(value, Op::Silu(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let g = self.grad_any(&[a]);
        self.push(value, Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(Error::shape("dot", self.shape(a), self.shape(b)));
        }
        let value = Tensor::scalar(tensor::dot(self.value(a).data(), self.value(b).data()));
        let g = self.grad_any(&[a, b]);
        Ok(self.push(value, Op::Dot(a, b), g))
    }

    /// Sums a non-empty list of same-shaped vars.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::contract("add_all of nothing"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// `gain ⊙ x / sqrt(mean(x²) + eps)` over the trailing axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (sx, sg) = (self.shape(x), self.shape(gain));
        if sg.len() != 1 || sg[0] != *sx.last().unwrap() {
            return Err(Error::shape("rms_norm", sx, sg));
        }
        let (out, inv_rms) = tensor::rms_norm_rows(self.value(x).data(), self.value(gain).data(), eps);
        let value = Tensor::new(sx.to_vec(), out)?;
        let g = self.grad_any(&[x, gain]);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, g))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).softmax(axis)?;
        let g = self.grad_any(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, g))
    }

    /// Summed negative log-likelihood `−Σ_i log softmax(logits_i)[targets_i]`,
    /// evaluated through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, vocab) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != t {
            return Err(Error::shape("cross_entropy", &[t, vocab], &[targets.len()]));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(t * vocab);
        let mut loss = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            if target >= vocab {
                return Err(Error::Index {
                    what: "target vocabulary",
                    index: target,
                    len: vocab,
                });
            }
            let row = lv.row(i);
            let lse = tensor::log_sum_exp(row);
            loss += lse - row[target];
            probs.extend(row.iter().map(|z| (z - lse).exp()));
        }
        let g = self.grad_any(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, g))
    }

    /// Row lookup `table[ids[i]]`, giving `ids.len() × d`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims("gather_rows", table)?;
        if ids.is_empty() {
            return Err(Error::contract("gather_rows with no ids"));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    len: n,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let g = self.grad_any(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (t, d) = self.matrix_dims("slice_rows", x)?;
        if len == 0 || start + len > t {
            return Err(Error::Index {
                what: "rows",
                index: start + len,
                len: t,
            });
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let value = Tensor::new(vec![len, d], data)?;
        let g = self.grad_any(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let (_, d) = self.matrix_dims("concat_rows", first)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, dp) = self.matrix_dims("concat_rows", p)?;
            if dp != d {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, d], data)?;
        let g = self.grad_any(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), g))
    }

    /// Column means over rows, `T×d → 1×d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (t, d) = self.matrix_dims("mean_rows", x)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; d];
        for r in 0..t {
            for (o, v) in out.iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= t as f64);
        let value = Tensor::new(vec![1, d], out)?;
        let g = self.grad_any(&[x]);
        Ok(self.push(value, Op::MeanRows(x), g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let g = self.grad_any(&[x]);
        Ok(self.push(value, Op::Reshape(x), g))
    }

    /// Rotary position encoding on each head of a `T×d` matrix; row `i`
    /// is treated as position `offset + i`.
    pub fn rope(&mut self, x: Var, n_heads: usize, base: f64, offset: usize) -> Result<Var> {
        let (t, d) = self.matrix_dims("rope", x)?;
        let head_dim = nn::head_dim(d, n_heads)?;
        let mut data = self.value(x).data().to_vec();
        for (r, row) in data.chunks_mut(d).enumerate() {
            for head in row.chunks_mut(head_dim) {
                nn::rope_rotate(head, offset + r, base, false);
            }
        }
        let value = Tensor::new(vec![t, d], data)?;
        let g = self.grad_any(&[x]);
        let op = Op::Rope {
            x,
            n_heads,
            base,
            offset,
        };
        Ok(self.push(value, op, g))
    }

    /// Scaled dot-product attention over `n_heads` heads of `T×d` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, causal: bool) -> Result<Var> {
        let (t, d) = self.matrix_dims("attention", q)?;
        for other in [k, v] {
            if self.shape(other) != [t, d] {
                return Err(Error::shape("attention", &[t, d], self.shape(other)));
            }
        }
        let (out, probs) = nn::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            t,
            d,
            n_heads,
            causal,
        )?;
        let value = Tensor::new(vec![t, d], out)?;
        let g = self.grad_any(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                probs,
            },
            g,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; n];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                let target = &self.nodes[v.0];
                if !target.needs_grad {
                    return;
                }
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; target.value.numel()]);
                f(buf);
            };
            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let nn = bv.shape()[1];
                    acc(*a, &mut |buf| tensor::gemm_nt(&g, bv.data(), m, k, nn, buf));
                    acc(*b, &mut |buf| tensor::gemm_tn(av.data(), &g, m, k, nn, buf));
                }
                Op::Transpose(a) => {
                    let (m, nn) = (self.shape(*a)[0], self.shape(*a)[1]);
                    acc(*a, &mut |buf| {
                        for r in 0..m {
                            for c in 0..nn {
                                buf[r * nn + c] += g[c * m + r];
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |buf| add_into(buf, &g));
                    acc(*b, &mut |buf| add_into(buf, &g));
                }
                Op::AddBias(a, b) => {
                    acc(*a, &mut |buf| add_into(buf, &g));
                    acc(*b, &mut |buf| {
                        let d = buf.len();
                        for row in g.chunks(d) {
                            add_into(buf, row);
                        }
                    });
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |buf| add_into(buf, &g));
                    acc(*b, &mut |buf| buf.iter_mut().zip(&g).for_each(|(o, x)| *o -= x));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, &mut |buf| {
                        for ((o, gi), bi) in buf.iter_mut().zip(&g).zip(bv) {
                            *o += gi * bi;
                        }
                    });
                    acc(*b, &mut |buf| {
                        for ((o, gi), ai) in buf.iter_mut().zip(&g).zip(av) {
                            *o += gi * ai;
                        }
                    });
                }
                Op::Scale(a, c) => {
                    acc(*a, &mut |buf| buf.iter_mut().zip(&g).for_each(|(o, x)| *o += c * x));
                }
                Op::Silu(a) => {
                    let av = self.value(*a).data();
                    acc(*a, &mut |buf| {
                        for ((o, gi), &x) in buf.iter_mut().zip(&g).zip(av) {
                            let s = tensor::sigmoid(x);
                            *o += gi * s * (1.0 + x * (1.0 - s));
                        }
                    });
                }
                Op::Sum(a) => {
                    acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0]));
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, &mut |buf| buf.iter_mut().zip(bv).for_each(|(o, x)| *o += g[0] * x));
                    acc(*b, &mut |buf| buf.iter_mut().zip(av).for_each(|(o, x)| *o += g[0] * x));
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = self.value(*x).data();
                    let gv = self.value(*gain).data();
                    let d = gv.len();
                    acc(*gain, &mut |buf| {
                        for (r, &s) in inv_rms.iter().enumerate() {
                            for j in 0..d {
                                buf[j] += g[r * d + j] * xv[r * d + j] * s;
                            }
                        }
                    });
                    acc(*x, &mut |buf| {
                        for (r, &s) in inv_rms.iter().enumerate() {
                            let xr = &xv[r * d..(r + 1) * d];
                            let gr = &g[r * d..(r + 1) * d];
                            let proj: f64 = (0..d).map(|j| gr[j] * gv[j] * xr[j]).sum();
                            let c = s * s * s * proj / d as f64;
                            for j in 0..d {
                                buf[r * d + j] += s * gv[j] * gr[j] - c * xr[j];
                            }
                        }
                    });
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis)?;
                    acc(*x, &mut |buf| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |j: usize| (o * len + j) * inner + i;
                                let s: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                                for j in 0..len {
                                    buf[idx(j)] += y[idx(j)] * (g[idx(j)] - s);
                                }
                            }
                        }
                    });
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let vocab = self.shape(*logits)[1];
                    acc(*logits, &mut |buf| {
                        for (o, p) in buf.iter_mut().zip(probs) {
                            *o += g[0] * p;
                        }
                        for (i, &t) in targets.iter().enumerate() {
                            buf[i * vocab + t] -= g[0];
                        }
                    });
                }
                Op::Gather { table, ids } => {
                    let d = self.shape(*table)[1];
                    acc(*table, &mut |buf| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    });
                }
                Op::SliceRows { x, start } => {
                    let d = self.shape(*x)[1];
                    acc(*x, &mut |buf| add_into(&mut buf[start * d..start * d + g.len()], &g));
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        acc(p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                        offset += len;
                    }
                }
                Op::MeanRows(x) => {
                    let (t, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                    acc(*x, &mut |buf| {
                        for r in 0..t {
                            for j in 0..d {
                                buf[r * d + j] += g[j] / t as f64;
                            }
                        }
                    });
                }
                Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, &g)),
                Op::Rope {
                    x,
                    n_heads,
                    base,
                    offset,
                } => {
                    let d = self.shape(*x)[1];
                    let head_dim = d / n_heads;
                    let mut back = g.clone();
                    for (r, row) in back.chunks_mut(d).enumerate() {
                        for head in row.chunks_mut(head_dim) {
                            nn::rope_rotate(head, offset + r, *base, true);
                        }
                    }
                    acc(*x, &mut |buf| add_into(buf, &back));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    n_heads,
                    probs,
                } => {
                    let (t, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                    let (dq, dk, dv) = nn::attention_backward(
                        &g,
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        probs,
                        t,
                        d,
                        *n_heads,
                    );
                    acc(*q, &mut |buf| add_into(buf, &dq));
                    acc(*k, &mut |buf| add_into(buf, &dk));
                    acc(*v, &mut |buf| add_into(buf, &dv));
                }
            }
        }

        // Leaves that asked for a gradient but were never reached get zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && leaf_grads[i].is_none() {
                leaf_grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of every `requires_grad` leaf on the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Largest relative disagreement between the taped gradient of `f` at `x`
/// and central finite differences with step `h`.
///
/// Per coordinate the error is `|a − n| / (|a| + |n| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    let analytic = tape.backward(loss)?.take(xv).expect("leaf gradient");

    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12));
    }
    Ok(worst)
}
