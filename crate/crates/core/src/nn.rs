//! Llama-style pre-norm transformer blocks: rotary attention, RMS norm and a
//! SiLU-gated feed-forward layer. Each block has a taped full-sequence path
//! and an incremental path over a KV cache; both use the same row kernels so
//! they agree bit for bit.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

pub fn head_dim(d: usize, n_heads: usize) -> Result<usize> {
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::config(format!("width {d} is not divisible by {n_heads} heads")));
    }
    let hd = d / n_heads;
    if !hd.is_multiple_of(2) {
        return Err(Error::config(format!(
            "head dimension {hd} must be even for rotary encoding"
        )));
    }
    Ok(hd)
}

/// Rotates consecutive pairs `(x[2i], x[2i+1])` of one head by
/// `position / base^(2i/head_dim)`; `inverse` rotates the other way.
pub fn rope_rotate(head: &mut [f64], position: usize, base: f64, inverse: bool) {
    let hd = head.len();
    if position == 0 {
        return;
    }
    for i in 0..hd / 2 {
        let theta = position as f64 / base.powf(2.0 * i as f64 / hd as f64);
        let (s, c) = theta.sin_cos();
        let s = if inverse { -s } else { s };
        let (x0, x1) = (head[2 * i], head[2 * i + 1]);
        head[2 * i] = x0 * c - x1 * s;
        head[2 * i + 1] = x0 * s + x1 * c;
    }
}

/// Attention of one query row against `n_keys` cached key/value rows.
/// Writes the output row and the per-head probabilities
/// (`n_heads × n_keys`, head-major) into the given buffers.
fn attend_row(
    q_row: &[f64],
    keys: &[f64],
    values: &[f64],
    n_keys: usize,
    n_heads: usize,
    out_row: &mut [f64],
    probs: &mut [f64],
) {
    let d = q_row.len();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    for h in 0..n_heads {
        let off = h * hd;
        let qh = &q_row[off..off + hd];
        let p = &mut probs[h * n_keys..(h + 1) * n_keys];
        let mut max = f64::NEG_INFINITY;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = tensor::dot(qh, &keys[j * d + off..j * d + off + hd]) * scale;
            max = max.max(*pj);
        }
        let mut sum = 0.0;
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            sum += *pj;
        }
        let oh = &mut out_row[off..off + hd];
        oh.iter_mut().for_each(|o| *o = 0.0);
        for (j, pj) in p.iter_mut().enumerate() {
            *pj /= sum;
            for (o, vv) in oh.iter_mut().zip(&values[j * d + off..j * d + off + hd]) {
                *o += *pj * vv;
            }
        }
    }
}

/// Multi-head attention over `t` rows. Returns the output and the
/// probabilities laid out as `n_heads × t × t` (masked entries are zero).
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    d: usize,
    n_heads: usize,
    causal: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    head_dim(d, n_heads)?;
    let mut out = vec![0.0; t * d];
    let mut probs = vec![0.0; n_heads * t * t];
    let mut scratch = vec![0.0; n_heads * t];
    for i in 0..t {
        let n_keys = if causal { i + 1 } else { t };
        attend_row(
            &q[i * d..(i + 1) * d],
            k,
            v,
            n_keys,
            n_heads,
            &mut out[i * d..(i + 1) * d],
            &mut scratch[..n_heads * n_keys],
        );
        for h in 0..n_heads {
            let dst = (h * t + i) * t;
            probs[dst..dst + n_keys].copy_from_slice(&scratch[h * n_keys..(h + 1) * n_keys]);
        }
    }
    Ok((out, probs))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    t: usize,
    d: usize,
    n_heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (mut dq, mut dk, mut dv) = (vec![0.0; t * d], vec![0.0; t * d], vec![0.0; t * d]);
    let mut dp = vec![0.0; t];
    for h in 0..n_heads {
        let off = h * hd;
        for i in 0..t {
            let p = &probs[(h * t + i) * t..(h * t + i + 1) * t];
            let gi = &g[i * d + off..i * d + off + hd];
            let mut s = 0.0;
            for j in 0..t {
                if p[j] == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                dp[j] = tensor::dot(gi, &v[j * d + off..j * d + off + hd]);
                s += p[j] * dp[j];
                for (o, gv) in dv[j * d + off..j * d + off + hd].iter_mut().zip(gi) {
                    *o += p[j] * gv;
                }
            }
            for j in 0..t {
                if p[j] == 0.0 {
                    continue;
                }
                let ds = p[j] * (dp[j] - s) * scale;
                for c in 0..hd {
                    dq[i * d + off + c] += ds * k[j * d + off + c];
                    dk[j * d + off + c] += ds * q[i * d + off + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Parameter handles of one transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ffn_norm: ParamId,
    w_gate: ParamId,
    w_up: ParamId,
    w_down: ParamId,
}

/// Parameters in one block of width `d` with hidden width `ffn_mult · d`.
pub fn block_param_count(d: u64, ffn_mult: u64) -> u64 {
    4 * d * d + 3 * d * (ffn_mult * d) + 2 * d
}

/// A stack of blocks sharing width, head count and masking.
#[derive(Clone, Debug)]
pub struct Stack {
    blocks: Vec<Block>,
    d: usize,
    n_heads: usize,
    rope_base: f64,
    causal: bool,
}

pub struct StackShape {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub rope_base: f64,
    pub causal: bool,
}

impl Stack {
    /// Registers the stack's parameters under `prefix`. Residual output
    /// projections use a depth-scaled std.
    pub fn new(shape: &StackShape, prefix: &str, store: &mut ParamStore, init: &mut Init) -> Result<Self> {
        let StackShape {
            d,
            n_layers,
            n_heads,
            ffn_mult,
            rope_base,
            causal,
        } = *shape;
        head_dim(d, n_heads)?;
        if ffn_mult == 0 {
            return Err(Error::config("ffn_mult must be at least 1"));
        }
        let hidden = ffn_mult * d;
        let resid_std = INIT_STD / (2.0 * n_layers.max(1) as f64).sqrt();
        let blocks = (0..n_layers)
            .map(|l| {
                let p = |n: &str| format!("{prefix}.{l}.{n}");
                Block {
                    attn_norm: store.add(p("attn_norm"), Tensor::full(&[d], 1.0)),
                    wq: store.add(p("wq"), init.normal(&[d, d], INIT_STD)),
                    wk: store.add(p("wk"), init.normal(&[d, d], INIT_STD)),
                    wv: store.add(p("wv"), init.normal(&[d, d], INIT_STD)),
                    wo: store.add(p("wo"), init.normal(&[d, d], resid_std)),
                    ffn_norm: store.add(p("ffn_norm"), Tensor::full(&[d], 1.0)),
                    w_gate: store.add(p("w_gate"), init.normal(&[d, hidden], INIT_STD)),
                    w_up: store.add(p("w_up"), init.normal(&[d, hidden], INIT_STD)),
                    w_down: store.add(p("w_down"), init.normal(&[hidden, d], resid_std)),
                }
            })
            .collect();
        Ok(Self {
            blocks,
            d,
            n_heads,
            rope_base,
            causal,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Full-sequence forward of a `T×d` input.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            let h = tape.rms_norm(x, p[b.attn_norm], NORM_EPS)?;
            let q = tape.matmul(h, p[b.wq])?;
            let k = tape.matmul(h, p[b.wk])?;
            let v = tape.matmul(h, p[b.wv])?;
            let q = tape.rope(q, self.n_heads, self.rope_base, 0)?;
            let k = tape.rope(k, self.n_heads, self.rope_base, 0)?;
            let a = tape.attention(q, k, v, self.n_heads, self.causal)?;
            let a = tape.matmul(a, p[b.wo])?;
            x = tape.add(x, a)?;

            let h = tape.rms_norm(x, p[b.ffn_norm], NORM_EPS)?;
            let gate = tape.matmul(h, p[b.w_gate])?;
            let gate = tape.silu(gate);
            let up = tape.matmul(h, p[b.w_up])?;
            let f = tape.mul(gate, up)?;
            let f = tape.matmul(f, p[b.w_down])?;
            x = tape.add(x, f)?;
        }
        Ok(x)
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache {
            layers: vec![(Vec::new(), Vec::new()); self.blocks.len()],
            len: 0,
        }
    }

    /// Processes the next position of a causal stack given everything
    /// already in `cache`.
    pub fn step(&self, store: &ParamStore, x_row: &[f64], cache: &mut KvCache) -> Result<Vec<f64>> {
        if !self.causal {
            return Err(Error::contract("incremental decoding requires a causal stack"));
        }
        let d = self.d;
        if x_row.len() != d {
            return Err(Error::shape("stack step", &[d], &[x_row.len()]));
        }
        let pos = cache.len;
        let hd = d / self.n_heads;
        let mut x = x_row.to_vec();
        for (b, (keys, values)) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            let w = |id: ParamId| store.get(id).data();
            let (h, _) = tensor::rms_norm_rows(&x, w(b.attn_norm), NORM_EPS);
            let mut q = row_matmul(&h, store.get(b.wq));
            let mut k = row_matmul(&h, store.get(b.wk));
            let v = row_matmul(&h, store.get(b.wv));
            for head in q.chunks_mut(hd) {
                rope_rotate(head, pos, self.rope_base, false);
            }
            for head in k.chunks_mut(hd) {
                rope_rotate(head, pos, self.rope_base, false);
            }
            keys.extend_from_slice(&k);
            values.extend_from_slice(&v);
            let n_keys = pos + 1;
            let mut a = vec![0.0; d];
            let mut probs = vec![0.0; self.n_heads * n_keys];
            attend_row(&q, keys, values, n_keys, self.n_heads, &mut a, &mut probs);
            let a = row_matmul(&a, store.get(b.wo));
            x.iter_mut().zip(&a).for_each(|(xi, ai)| *xi += ai);

            let (h, _) = tensor::rms_norm_rows(&x, w(b.ffn_norm), NORM_EPS);
            let gate = row_matmul(&h, store.get(b.w_gate));
            let up = row_matmul(&h, store.get(b.w_up));
            let f: Vec<f64> = gate.iter().zip(&up).map(|(&g, u)| tensor::silu(g) * u).collect();
            let f = row_matmul(&f, store.get(b.w_down));
            x.iter_mut().zip(&f).for_each(|(xi, fi)| *xi += fi);
        }
        cache.len += 1;
        Ok(x)
    }
}

/// `x · W` for a single row.
pub fn row_matmul(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; n];
    tensor::gemm(x, w.data(), 1, k, n, &mut out);
    out
}

/// Per-layer keys (post-rotation) and values seen so far in one session.
#[derive(Clone, Debug)]
pub struct KvCache {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}
