use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_bias, RiskError, StateActionSequence};
use crate::nn::{
    Adam, AdamConfig, Bound, Checkpoint, Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, NnError, ParamGrads,
    ParamStore, QueryRows, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskConfig {
    pub seq_len: usize,
    pub state_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    /// Hidden widths of the classification head; a final width-1 layer is appended.
    pub head_hidden: Vec<usize>,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Drop the bias term from the attention scores altogether.
    pub plain_attention: bool,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            seq_len: 10,
            state_dim: 98,
            dim: 128,
            heads: 4,
            layers: 2,
            ff_dim: 512,
            head_hidden: vec![128, 64],
            beta: 0.2,
            lr: 1e-5,
            batch_size: 128,
            plain_attention: false,
        }
    }
}

impl RiskConfig {
    pub fn row_dim(&self) -> usize {
        self.state_dim + 1
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: Mlp,
}

/// Pre-softmax attention scores for one sequence.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    /// `raw[layer][head]` is `Q K^T / sqrt(d_k)`, `[n, n]`.
    pub raw: Vec<Vec<Tensor>>,
    pub bias: Tensor,
}

impl AttentionMaps {
    pub fn biased(&self, layer: usize, head: usize) -> Tensor {
        let r = &self.raw[layer][head];
        let data = r.data().iter().zip(self.bias.data()).map(|(a, b)| a + b).collect();
        Tensor::new(r.shape(), data).expect("same shape")
    }
}

#[derive(Clone, Debug)]
pub struct RiskModel {
    config: RiskConfig,
    params: ParamStore,
    embed: Linear,
    pos: Tensor,
    blocks: Vec<Block>,
    head: Mlp,
    bias: Tensor,
    adam: Adam,
}

/// Fixed sinusoidal position table `[n, d]`.
fn sinusoidal(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[n, d], data).expect("pos shape")
}

impl RiskModel {
    pub fn new(config: RiskConfig, seed: u64) -> Self {
        assert!(config.layers >= 1, "risk model needs at least one encoder layer");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.dim;
        let embed = Linear::new(&mut params, "embed", config.row_dim(), d, &mut rng);
        let blocks = (0..config.layers)
            .map(|l| Block {
                ln_attn: LayerNorm::new(&mut params, &format!("enc{l}.ln_attn"), d),
                attn: MultiHeadAttention::new(&mut params, &format!("enc{l}.attn"), d, config.heads, &mut rng),
                ln_ff: LayerNorm::new(&mut params, &format!("enc{l}.ln_ff"), d),
                ff: Mlp::new(&mut params, &format!("enc{l}.ff"), &[d, config.ff_dim, d], &mut rng),
            })
            .collect();
        let mut sizes = vec![d];
        sizes.extend(&config.head_hidden);
        sizes.push(1);
        let head = Mlp::new(&mut params, "head", &sizes, &mut rng);
        let adam = Adam::new(AdamConfig::with_lr(config.lr), &params);
        Self {
            pos: sinusoidal(config.seq_len, d),
            bias: build_bias(config.seq_len, config.beta),
            config,
            params,
            embed,
            blocks,
            head,
            adam,
        }
    }

    pub fn config(&self) -> &RiskConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// Replaces the score bias matrix (must be `[n, n]`).
    pub fn set_bias(&mut self, bias: Tensor) {
        assert_eq!(bias.shape(), [self.config.seq_len, self.config.seq_len], "bias shape");
        self.bias = bias;
    }

    pub fn set_plain_attention(&mut self, on: bool) {
        self.config.plain_attention = on;
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
        self.adam.config.lr = lr;
    }

    pub fn train_steps(&self) -> u64 {
        self.adam.steps_taken()
    }

    /// Zeroes the last head layer so every output is exactly 0.5.
    pub fn zero_output_layer(&mut self) {
        let last = self.head.last().clone();
        for id in [last.weight, last.bias] {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn stack(&self, seqs: &[&StateActionSequence]) -> Result<Tensor, RiskError> {
        let (n, r) = (self.config.seq_len, self.config.row_dim());
        let mut data = Vec::with_capacity(seqs.len() * n * r);
        for s in seqs {
            s.validate(n, r)?;
            data.extend_from_slice(&s.rows);
        }
        Ok(Tensor::new(&[seqs.len() * n, r], data)?)
    }

    /// Encoder output for the newest position of each sequence, `[batch, dim]`.
    fn encode<'g>(&self, g: &'g Graph, p: &Bound<'g, '_>, x: Var<'g>, batch: usize) -> Var<'g> {
        let (n, d) = (self.config.seq_len, self.config.dim);
        let last_rows: Vec<usize> = (0..batch).map(|b| b * n + n - 1).collect();
        let h = self.embed.forward(p, x);
        let mut z = h.reshape(&[batch, n, d]).add_broadcast(g.constant(self.pos.clone())).reshape(&[batch * n, d]);
        let bias = (!self.config.plain_attention).then(|| g.constant(self.bias.clone()));
        let depth = self.blocks.len();
        for (l, blk) in self.blocks.iter().enumerate() {
            // only the newest token is needed after the final attention
            let last = l + 1 == depth;
            let rows = if last { QueryRows::LastOnly } else { QueryRows::All };
            let attn = blk.attn.forward(p, blk.ln_attn.forward(p, z), batch, n, bias, rows);
            let resid = if last { z.gather_rows(&last_rows) } else { z };
            let z1 = resid + attn;
            z = z1 + blk.ff.forward(p, blk.ln_ff.forward(p, z1));
        }
        z
    }

    /// Full-sequence encoder output `[batch*n, dim]`, used to cross-check the
    /// newest-token shortcut.
    fn encode_all<'g>(&self, g: &'g Graph, p: &Bound<'g, '_>, x: Var<'g>, batch: usize) -> Var<'g> {
        let (n, d) = (self.config.seq_len, self.config.dim);
        let h = self.embed.forward(p, x);
        let mut z = h.reshape(&[batch, n, d]).add_broadcast(g.constant(self.pos.clone())).reshape(&[batch * n, d]);
        let bias = (!self.config.plain_attention).then(|| g.constant(self.bias.clone()));
        for blk in &self.blocks {
            let z1 = z + blk.attn.forward(p, blk.ln_attn.forward(p, z), batch, n, bias, QueryRows::All);
            z = z1 + blk.ff.forward(p, blk.ln_ff.forward(p, z1));
        }
        z
    }

    fn logits<'g>(&self, g: &'g Graph, p: &Bound<'g, '_>, x: Var<'g>, batch: usize) -> Var<'g> {
        self.head.forward(p, self.encode(g, p, x, batch))
    }

    /// Risk for a batch of sequences.
    pub fn predict_batch(&self, seqs: &[&StateActionSequence]) -> Result<Vec<f64>, RiskError> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(256) {
            let x = self.stack(chunk)?;
            let g = Graph::new();
            let p = Bound::frozen(&g, &self.params);
            let logits = self.logits(&g, &p, g.constant(x), chunk.len());
            out.extend(logits.value().data().iter().map(|&z| crate::nn::sigmoid(z)));
        }
        Ok(out)
    }

    pub fn predict_risk(&self, seq: &StateActionSequence) -> Result<f64, RiskError> {
        Ok(self.predict_batch(&[seq])?[0])
    }

    /// Same as [`RiskModel::predict_batch`] but through the full-sequence path.
    pub fn predict_batch_full(&self, seqs: &[&StateActionSequence]) -> Result<Vec<f64>, RiskError> {
        let n = self.config.seq_len;
        let x = self.stack(seqs)?;
        let g = Graph::new();
        let p = Bound::frozen(&g, &self.params);
        let z = self.encode_all(&g, &p, g.constant(x), seqs.len());
        let last: Vec<usize> = (0..seqs.len()).map(|b| b * n + n - 1).collect();
        let logits = self.head.forward(&p, z.gather_rows(&last));
        Ok(logits.value().data().iter().map(|&z| crate::nn::sigmoid(z)).collect())
    }

    /// Mean BCE on a labeled batch and its gradient for every parameter.
    pub fn loss_and_grads(&self, batch: &[&StateActionSequence]) -> Result<(f64, ParamGrads), RiskError> {
        if batch.is_empty() {
            return Err(RiskError::EmptyBatch);
        }
        let labels =
            batch.iter().map(|s| s.label.map(f64::from).ok_or(RiskError::Unlabeled)).collect::<Result<Vec<_>, _>>()?;
        let x = self.stack(batch)?;
        let g = Graph::new();
        let p = Bound::trainable(&g, &self.params);
        let loss = self.logits(&g, &p, g.constant(x), batch.len()).bce_with_logits(&labels);
        let value = loss.item();
        Ok((value, p.grads(&g.backward(loss))))
    }

    /// Mean BCE on a labeled batch followed by one Adam update. Returns the
    /// loss before the update.
    pub fn train_step(&mut self, batch: &[&StateActionSequence]) -> Result<f64, RiskError> {
        let (loss, grads) = self.loss_and_grads(batch)?;
        self.adam.step(&mut self.params, &grads);
        Ok(loss)
    }

    /// Mean BCE and accuracy at threshold 0.5, without updating.
    pub fn evaluate(&self, seqs: &[&StateActionSequence]) -> Result<(f64, f64), RiskError> {
        if seqs.is_empty() {
            return Err(RiskError::EmptyBatch);
        }
        let probs = self.predict_batch(seqs)?;
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (p, s) in probs.iter().zip(seqs) {
            let y = f64::from(s.label.ok_or(RiskError::Unlabeled)?);
            let pc = p.clamp(1e-12, 1.0 - 1e-12);
            loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            if (*p >= 0.5) == (y == 1.0) {
                correct += 1;
            }
        }
        Ok((loss / seqs.len() as f64, correct as f64 / seqs.len() as f64))
    }

    /// Risk with the newest action overwritten by each probe value, in order.
    pub fn sensitivity_probe(&self, seq: &StateActionSequence, actions: &[f64]) -> Result<Vec<(f64, f64)>, RiskError> {
        let probes: Vec<StateActionSequence> = actions.iter().map(|&a| seq.with_last_action(a)).collect();
        let refs: Vec<&StateActionSequence> = probes.iter().collect();
        let risks = self.predict_batch(&refs)?;
        Ok(actions.iter().copied().zip(risks).collect())
    }

    /// Raw per-head attention scores of every layer for one sequence.
    pub fn attention_maps(&self, seq: &StateActionSequence) -> Result<AttentionMaps, RiskError> {
        let (n, d) = (self.config.seq_len, self.config.dim);
        let x = self.stack(&[seq])?;
        let g = Graph::new();
        let p = Bound::frozen(&g, &self.params);
        let h = self.embed.forward(&p, g.constant(x));
        let mut z = h.add_broadcast(g.constant(self.pos.clone())).reshape(&[n, d]);
        let bias = (!self.config.plain_attention).then(|| g.constant(self.bias.clone()));
        let mut raw = Vec::new();
        for blk in &self.blocks {
            let normed = blk.ln_attn.forward(&p, z);
            let scores = blk.attn.raw_scores(&p, normed, 1, n).value();
            raw.push((0..self.config.heads).map(|h| head_slice(&scores, h, n)).collect());
            let z1 = z + blk.attn.forward(&p, normed, 1, n, bias, QueryRows::All);
            z = z1 + blk.ff.forward(&p, blk.ln_ff.forward(&p, z1));
        }
        let bias = if self.config.plain_attention { Tensor::zeros(&[n, n]) } else { self.bias.clone() };
        Ok(AttentionMaps { raw, bias })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "kind": "risk", "config": self.config });
        Checkpoint::from_store(&self.params, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, RiskError> {
        let config: RiskConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| NnError::Checkpoint(format!("risk config: {e}")))?;
        let mut model = Self::new(config, 0);
        ck.load_into(&mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), RiskError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, RiskError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn head_slice(scores: &Tensor, h: usize, n: usize) -> Tensor {
    let data = scores.data()[h * n * n..(h + 1) * n * n].to_vec();
    Tensor::new(&[n, n], data).expect("head slice")
}
