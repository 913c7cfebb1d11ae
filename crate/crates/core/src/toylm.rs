//! A tiny hand-differentiated language model for desk-scale checks.
//!
//! For target position `i` with effective context `l > 0` the feature is
//! `[e(x[i-1]) ; mean(e(x[s(i)..i]))]`, i.e. the previous token's embedding
//! concatenated with the mean embedding of every earlier token in the same
//! segment. A linear map plus bias produces logits. Segment-initial targets
//! (`l == 0`) see a zero feature and are predicted from the bias alone. The
//! pooled key signal fades as `1/l`, so far targets are genuinely harder.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::exposure::{mean_ce_by_bucket, BucketMean, BucketScheme};
use crate::objective::{gradient_scale, weighted_loss, ObjectiveConfig};
use crate::packer::{pack_stream, PackPolicy, PackedSequence, PackedStream};
use crate::util::{seeded_rng, ByteCursor, NeumaierSum};
use crate::weights::{weights_for_stream, TokenWeights, WeightPolicy};

pub const MODEL_MAGIC: &[u8; 4] = b"EXTM";
pub const MODEL_VERSION: u16 = 1;
pub const DEFAULT_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub vocab: usize,
    pub dim: usize,
    /// `vocab x dim`, row per token.
    pub embed: Vec<f64>,
    /// `2*dim x vocab`, row per feature.
    pub out: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ToyModel {
    /// Embeddings ~ U(-1, 1) / sqrt(dim); output map and bias start at zero,
    /// so the initial prediction is uniform.
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, 0x7e57);
        let scale = 1.0 / (dim as f64).sqrt();
        Self {
            vocab,
            dim,
            embed: (0..vocab * dim).map(|_| rng.random_range(-1.0..1.0) * scale).collect(),
            out: vec![0.0; 2 * dim * vocab],
            bias: vec![0.0; vocab],
        }
    }

    pub fn num_params(&self) -> usize {
        self.embed.len() + self.out.len() + self.bias.len()
    }

    /// Flat parameter view: embeddings, then output map, then bias.
    pub fn param(&self, idx: usize) -> f64 {
        let (e, o) = (self.embed.len(), self.out.len());
        if idx < e {
            self.embed[idx]
        } else if idx < e + o {
            self.out[idx - e]
        } else {
            self.bias[idx - e - o]
        }
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut f64 {
        let (e, o) = (self.embed.len(), self.out.len());
        if idx < e {
            &mut self.embed[idx]
        } else if idx < e + o {
            &mut self.out[idx - e]
        } else {
            &mut self.bias[idx - e - o]
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(14 + 8 * self.num_params());
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.vocab as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in self.embed.iter().chain(&self.out).chain(&self.bias) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = ByteCursor::new(bytes, "EXTM");
        c.magic(MODEL_MAGIC)?;
        let version = c.u16()?;
        if version != MODEL_VERSION {
            return Err(c.error(format!("unsupported version {version}")));
        }
        let vocab = c.u32()? as usize;
        let dim = c.u32()? as usize;
        let mut read = |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| c.f64()).collect() };
        let embed = read(vocab * dim)?;
        let out = read(2 * dim * vocab)?;
        let bias = read(vocab)?;
        c.finish()?;
        Ok(Self {
            vocab,
            dim,
            embed,
            out,
            bias,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embed: Vec<f64>,
    pub out: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    fn zeros(model: &ToyModel) -> Self {
        Self {
            embed: vec![0.0; model.embed.len()],
            out: vec![0.0; model.out.len()],
            bias: vec![0.0; model.bias.len()],
        }
    }

    pub fn get(&self, idx: usize) -> f64 {
        let (e, o) = (self.embed.len(), self.out.len());
        if idx < e {
            self.embed[idx]
        } else if idx < e + o {
            self.out[idx - e]
        } else {
            self.bias[idx - e - o]
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.embed.iter().chain(&self.out).chain(&self.bias).copied()
    }
}

/// Per-sequence forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SequenceCache {
    /// `len x 2*dim` features (zero rows for unsupervised positions).
    features: Vec<f64>,
    /// `len x vocab` softmax outputs (zero rows for unsupervised positions).
    probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    sequences: Vec<SequenceCache>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub loss: f64,
    /// Per-token CE, 0 at unsupervised positions.
    pub ce: Vec<Vec<f64>>,
    pub cache: ForwardCache,
}

fn sequence_forward(model: &ToyModel, seq: &PackedSequence, seq_index: usize) -> Result<(Vec<f64>, SequenceCache)> {
    let (d, v) = (model.dim, model.vocab);
    let len = seq.len();
    let mut features = vec![0.0; len * 2 * d];
    let mut probs = vec![0.0; len * v];
    let mut ce = vec![0.0; len];
    let mut pool = vec![0.0; d];
    // Set when the running pool has absorbed a token outside the vocabulary.
    let mut pool_invalid = false;
    let mut logits = vec![0.0; v];

    for i in 0..len {
        let ell = seq.effective_context[i] as usize;
        if ell == 0 {
            pool.iter_mut().for_each(|x| *x = 0.0);
            pool_invalid = false;
        }
        if seq.loss_mask[i] {
            let target = seq.tokens[i] as usize;
            if target >= v || (ell > 0 && pool_invalid) {
                return Err(Error::InvalidConfig(format!(
                    "sequence {seq_index} position {i}: token id outside vocabulary {v}"
                )));
            }
            let feat = &mut features[i * 2 * d..(i + 1) * 2 * d];
            if ell > 0 {
                let prev = seq.tokens[i - 1] as usize;
                feat[..d].copy_from_slice(&model.embed[prev * d..(prev + 1) * d]);
                let inv = 1.0 / ell as f64;
                for (f, p) in feat[d..].iter_mut().zip(&pool) {
                    *f = p * inv;
                }
            }
            logits.copy_from_slice(&model.bias);
            for (f, &x) in feat.iter().enumerate() {
                if x != 0.0 {
                    let row = &model.out[f * v..(f + 1) * v];
                    for (l, w) in logits.iter_mut().zip(row) {
                        *l += x * w;
                    }
                }
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[i * v..(i + 1) * v];
            let mut z = 0.0;
            for (pj, &l) in p.iter_mut().zip(&logits) {
                *pj = (l - max).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            ce[i] = max + z.ln() - logits[target];
            if !ce[i].is_finite() {
                return Err(Error::NonFinite {
                    what: "toy model CE",
                    index: seq_index * len + i,
                });
            }
        }
        let tok = seq.tokens[i] as usize;
        if tok < v {
            for (p, e) in pool.iter_mut().zip(&model.embed[tok * d..(tok + 1) * d]) {
                *p += e;
            }
        } else {
            pool_invalid = true;
        }
    }
    Ok((ce, SequenceCache { features, probs }))
}

fn flatten(seqs: &[&PackedSequence], weights: &[&[f64]]) -> Result<(Vec<bool>, Vec<f64>)> {
    if seqs.len() != weights.len() {
        return Err(Error::LengthMismatch {
            what: "batch weights",
            expected: seqs.len(),
            actual: weights.len(),
        });
    }
    let mut mask = Vec::new();
    let mut w = Vec::new();
    for (s, ws) in seqs.iter().zip(weights) {
        if ws.len() != s.len() {
            return Err(Error::LengthMismatch {
                what: "token weights",
                expected: s.len(),
                actual: ws.len(),
            });
        }
        mask.extend_from_slice(&s.loss_mask);
        w.extend_from_slice(ws);
    }
    Ok((mask, w))
}

/// Weighted objective of the toy model over a batch of sequences.
pub fn forward_loss(
    model: &ToyModel,
    seqs: &[&PackedSequence],
    weights: &[&[f64]],
    config: ObjectiveConfig,
) -> Result<ForwardOutput> {
    let (mask, w) = flatten(seqs, weights)?;
    let mut ce = Vec::with_capacity(seqs.len());
    let mut caches = Vec::with_capacity(seqs.len());
    for (k, s) in seqs.iter().enumerate() {
        let (c, cache) = sequence_forward(model, s, k)?;
        ce.push(c);
        caches.push(cache);
    }
    let flat: Vec<f64> = ce.iter().flatten().copied().collect();
    let loss = weighted_loss(&flat, &mask, &w, config)?;
    Ok(ForwardOutput {
        loss,
        ce,
        cache: ForwardCache { sequences: caches },
    })
}

/// Exact gradients of [`forward_loss`]'s objective.
pub fn backward(
    model: &ToyModel,
    seqs: &[&PackedSequence],
    cache: &ForwardCache,
    weights: &[&[f64]],
    config: ObjectiveConfig,
) -> Result<Gradients> {
    let (mask, w) = flatten(seqs, weights)?;
    let scale = gradient_scale(&mask, &w, config)?;
    let (d, v) = (model.dim, model.vocab);
    let mut grads = Gradients::zeros(model);
    let mut dlogits = vec![0.0; v];
    let mut dfeat = vec![0.0; 2 * d];
    let mut offset = 0;

    for (seq, sc) in seqs.iter().zip(&cache.sequences) {
        let len = seq.len();
        // d(loss)/d(pool mean) / l for each target, pushed back to every
        // earlier in-segment token by a reverse running sum.
        let mut pooled_grad = vec![0.0; len * d];
        for i in 0..len {
            let g = scale[offset + i];
            if !seq.loss_mask[i] || g == 0.0 {
                continue;
            }
            let target = seq.tokens[i] as usize;
            let p = &sc.probs[i * v..(i + 1) * v];
            for (dl, &pj) in dlogits.iter_mut().zip(p) {
                *dl = g * pj;
            }
            dlogits[target] -= g;
            for (b, dl) in grads.bias.iter_mut().zip(&dlogits) {
                *b += dl;
            }
            let ell = seq.effective_context[i] as usize;
            if ell == 0 {
                continue;
            }
            let feat = &sc.features[i * 2 * d..(i + 1) * 2 * d];
            for f in 0..2 * d {
                let row = &model.out[f * v..(f + 1) * v];
                let grow = &mut grads.out[f * v..(f + 1) * v];
                let x = feat[f];
                let mut acc = 0.0;
                for j in 0..v {
                    grow[j] += x * dlogits[j];
                    acc += row[j] * dlogits[j];
                }
                dfeat[f] = acc;
            }
            let prev = seq.tokens[i - 1] as usize;
            for (ge, df) in grads.embed[prev * d..(prev + 1) * d].iter_mut().zip(&dfeat[..d]) {
                *ge += df;
            }
            let inv = 1.0 / ell as f64;
            for (pg, df) in pooled_grad[i * d..(i + 1) * d].iter_mut().zip(&dfeat[d..]) {
                *pg = df * inv;
            }
        }
        let mut acc = vec![0.0; d];
        for i in (0..len).rev() {
            let tok = seq.tokens[i] as usize;
            if tok < v {
                for (ge, a) in grads.embed[tok * d..(tok + 1) * d].iter_mut().zip(&acc) {
                    *ge += a;
                }
            }
            if seq.effective_context[i] == 0 {
                acc.iter_mut().for_each(|a| *a = 0.0);
            } else {
                for (a, pg) in acc.iter_mut().zip(&pooled_grad[i * d..(i + 1) * d]) {
                    *a += pg;
                }
            }
        }
        offset += len;
    }
    Ok(grads)
}

/// Per-token CE of `model` over every sequence of `stream`.
pub fn per_token_ce(model: &ToyModel, stream: &PackedStream) -> Result<Vec<Vec<f64>>> {
    stream
        .sequences
        .par_iter()
        .enumerate()
        .map(|(k, s)| sequence_forward(model, s, k).map(|(ce, _)| ce))
        .collect()
}

/// Mean CE per effective-context bucket; unoccupied buckets are absent.
pub fn evaluate_by_bucket(model: &ToyModel, stream: &PackedStream) -> Result<Vec<BucketMean>> {
    let ce = per_token_ce(model, stream)?;
    mean_ce_by_bucket(stream, &ce)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub eval_every: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Fraction of documents (taken from the end) held out for evaluation.
    #[serde(default = "default_heldout")]
    pub heldout_fraction: f64,
    #[serde(default)]
    pub objective: ObjectiveConfig,
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

fn default_heldout() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            learning_rate: 0.5,
            seed: 0,
            eval_every: 50,
            dim: DEFAULT_DIM,
            heldout_fraction: 0.1,
            objective: ObjectiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.eval_every == 0 || self.dim == 0 {
            return bad("batch size, eval cadence and dim must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return bad("held-out fraction must be in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub heldout_mean_ce: f64,
    pub buckets: Vec<BucketMean>,
}

impl MetricsRow {
    /// Token-weighted mean CE over buckets with lower bound in `[lo, hi)`.
    pub fn mean_ce_between(&self, lo: u64, hi: u64) -> Option<f64> {
        let mut sum = NeumaierSum::new();
        let mut n = 0u64;
        for b in self
            .buckets
            .iter()
            .filter(|b| b.lower_bound >= lo && b.lower_bound < hi)
        {
            sum.add(b.mean_ce * b.count as f64);
            n += b.count;
        }
        (n > 0).then(|| sum.value() / n as f64)
    }
}

pub fn metrics_to_tsv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step\tbucket_lower_bound\theldout_mean_ce\tcount\ttrain_loss\n");
    for r in rows {
        for b in &r.buckets {
            out.push_str(&format!(
                "{}\t{}\t{:.12}\t{}\t{:.12}\n",
                r.step, b.lower_bound, b.mean_ce, b.count, r.train_loss
            ));
        }
        out.push_str(&format!(
            "{}\tall\t{:.12}\t{}\t{:.12}\n",
            r.step,
            r.heldout_mean_ce,
            r.buckets.iter().map(|b| b.count).sum::<u64>(),
            r.train_loss
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ToyModel,
    pub metrics: Vec<MetricsRow>,
    pub train_stream: PackedStream,
    pub heldout_stream: PackedStream,
}

fn eval_row(model: &ToyModel, heldout: &PackedStream, step: usize, train_loss: f64) -> Result<MetricsRow> {
    let ce = per_token_ce(model, heldout)?;
    let buckets = mean_ce_by_bucket(heldout, &ce)?;
    let mut sum = NeumaierSum::new();
    let mut n = 0u64;
    for b in &buckets {
        sum.add(b.mean_ce * b.count as f64);
        n += b.count;
    }
    Ok(MetricsRow {
        step,
        train_loss,
        heldout_mean_ce: if n > 0 { sum.value() / n as f64 } else { f64::NAN },
        buckets,
    })
}

/// Splits off held-out documents, packs both parts, derives token weights
/// from the training stream and runs plain SGD.
pub fn train(
    docs: Vec<Document>,
    vocab: usize,
    pack: &PackPolicy,
    policy: &WeightPolicy,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    let n_heldout = ((docs.len() as f64) * config.heldout_fraction).ceil() as usize;
    if n_heldout == 0 || n_heldout >= docs.len() {
        return Err(Error::InvalidConfig(
            "corpus too small for a train/held-out split".into(),
        ));
    }
    let mut docs = docs;
    let heldout_docs = docs.split_off(docs.len() - n_heldout);
    let train_stream = pack_stream(docs, pack)?;
    let heldout_pack = PackPolicy {
        drop_final_partial: false,
        ..pack.clone()
    };
    let heldout_stream = pack_stream(heldout_docs, &heldout_pack)?;
    if train_stream.sequences.is_empty() {
        return Err(Error::InvalidConfig("training stream has no full sequence".into()));
    }
    let (_, weights) = weights_for_stream(&train_stream, policy)?;
    let (model, metrics) = train_on_stream(&train_stream, &weights, &heldout_stream, vocab, config)?;
    Ok(TrainOutput {
        model,
        metrics,
        train_stream,
        heldout_stream,
    })
}

/// SGD over a pre-packed, pre-weighted stream.
pub fn train_on_stream(
    stream: &PackedStream,
    weights: &TokenWeights,
    heldout: &PackedStream,
    vocab: usize,
    config: &TrainConfig,
) -> Result<(ToyModel, Vec<MetricsRow>)> {
    config.validate()?;
    let mut model = ToyModel::new(vocab, config.dim, config.seed);
    let mut metrics = vec![eval_row(&model, heldout, 0, f64::NAN)?];
    let n = stream.sequences.len();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;

    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(n) {
            if cursor == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut seeded_rng(config.seed, 1 + epoch));
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let seqs: Vec<&PackedSequence> = batch.iter().map(|&k| &stream.sequences[k]).collect();
        let ws: Vec<&[f64]> = batch.iter().map(|&k| weights.sequences[k].as_slice()).collect();
        let fwd = forward_loss(&model, &seqs, &ws, config.objective)?;
        if !fwd.loss.is_finite() {
            return Err(Error::Divergence { step, loss: fwd.loss });
        }
        let grads = backward(&model, &seqs, &fwd.cache, &ws, config.objective)?;
        let lr = config.learning_rate;
        for (p, g) in model.embed.iter_mut().zip(&grads.embed) {
            *p -= lr * g;
        }
        for (p, g) in model.out.iter_mut().zip(&grads.out) {
            *p -= lr * g;
        }
        for (p, g) in model.bias.iter_mut().zip(&grads.bias) {
            *p -= lr * g;
        }
        if model.embed.iter().chain(&model.out).any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step, loss: fwd.loss });
        }
        if step % config.eval_every == 0 || step == config.steps {
            metrics.push(eval_row(&model, heldout, step, fwd.loss)?);
        }
    }
    Ok((model, metrics))
}

/// Lower bound of the first bucket counted as tail for threshold `tau`.
pub fn tail_floor(tau: u64) -> u64 {
    (0..64)
        .map(BucketScheme::lower_bound)
        .find(|&a| a >= tau)
        .unwrap_or(u64::MAX)
}
