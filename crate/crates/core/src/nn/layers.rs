//! Layers built on the autodiff graph. Each layer registers its parameters
//! in a caller-provided [`ParamStore`] and reads them back through a
//! [`Bound`] at forward time.

use rand::Rng;

use super::graph::Var;
use super::params::{Bound, ParamId, ParamStore};
use super::Tensor;

/// Affine map `x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` initialization for both weight and bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[in_dim, out_dim], bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::uniform(&[out_dim], bound, rng));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>) -> Var<'g> {
        affine(x, p.var(self.weight), p.var(self.bias))
    }
}

/// `x W + b` for `x: [rows, in]`, `W: [in, out]`, `b: [out]`.
pub fn affine<'g>(x: Var<'g>, w: Var<'g>, b: Var<'g>) -> Var<'g> {
    x.matmul(w).add_broadcast(b)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(&[dim]));
        Self { gain, shift }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.layer_norm(p.var(self.gain), p.var(self.shift))
    }
}

/// `Q K^T / sqrt(d_k)` for `q: [B, Nq, dk]`, `k: [B, N, dk]`.
pub fn scaled_scores<'g>(q: Var<'g>, k: Var<'g>) -> Var<'g> {
    let dk = *q.shape().last().expect("scores: empty shape");
    q.matmul_t(k, false, true).scale(1.0 / (dk as f64).sqrt())
}

/// `softmax(Q K^T / sqrt(d_k) + bias) V`.
///
/// Accepts 2-D `[N, dk]` operands or batched 3-D `[B, N, dk]` ones; `bias`
/// is `[Nq, N]` and is shared across the batch. Passing `None` gives plain
/// scaled dot-product attention.
pub fn attention_with_bias<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, bias: Option<Var<'g>>) -> Var<'g> {
    let two_d = q.shape().len() == 2;
    let (q, k, v) = if two_d {
        let lift = |x: Var<'g>| {
            let s = x.shape();
            x.reshape(&[1, s[0], s[1]])
        };
        (lift(q), lift(k), lift(v))
    } else {
        (q, k, v)
    };
    let mut scores = scaled_scores(q, k);
    if let Some(b) = bias {
        scores = scores.add_broadcast(b);
    }
    let out = scores.softmax().matmul(v);
    if two_d {
        let s = out.shape();
        out.reshape(&[s[1], s[2]])
    } else {
        out
    }
}

/// Which query positions a multi-head attention call computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryRows {
    All,
    /// Only the final position of each sequence; output is `[batch, D]`.
    LastOnly,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "model width {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Per-head raw scores `Q K^T / sqrt(d_k)`, shaped `[batch*heads, seq, seq]`.
    pub fn raw_scores<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>, batch: usize, seq: usize) -> Var<'g> {
        let q = self.query.forward(p, x).split_heads(batch, seq, self.heads);
        let k = self.key.forward(p, x).split_heads(batch, seq, self.heads);
        scaled_scores(q, k)
    }

    /// Self-attention over `x: [batch*seq, D]` with an optional additive
    /// `[seq, seq]` score bias.
    pub fn forward<'g>(
        &self,
        p: &Bound<'g, '_>,
        x: Var<'g>,
        batch: usize,
        seq: usize,
        bias: Option<Var<'g>>,
        rows: QueryRows,
    ) -> Var<'g> {
        let k = self.key.forward(p, x).split_heads(batch, seq, self.heads);
        let v = self.value.forward(p, x).split_heads(batch, seq, self.heads);
        match rows {
            QueryRows::All => {
                let q = self.query.forward(p, x).split_heads(batch, seq, self.heads);
                let attn = attention_with_bias(q, k, v, bias);
                self.output.forward(p, attn.merge_heads(batch, seq, self.heads))
            }
            QueryRows::LastOnly => {
                let last: Vec<usize> = (0..batch).map(|b| b * seq + seq - 1).collect();
                let q = self.query.forward(p, x.gather_rows(&last)).split_heads(batch, 1, self.heads);
                let bias_last = bias.map(|b| b.gather_rows(&[seq - 1]));
                let attn = attention_with_bias(q, k, v, bias_last);
                self.output.forward(p, attn.merge_heads(batch, 1, self.heads))
            }
        }
    }
}

/// Stack of affine layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, '_>, x: Var<'g>) -> Var<'g> {
        let n = self.layers.len();
        self.layers.iter().enumerate().fold(x, |h, (i, l)| {
            let y = l.forward(p, h);
            if i + 1 < n {
                y.relu()
            } else {
                y
            }
        })
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("empty mlp")
    }
}
