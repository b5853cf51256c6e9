//! Small multi-exit transformer encoder classifier with a deterministic
//! MAC cost model.
//!
//! Two forward paths exist: a plain inference path (float or int8) that
//! tracks per-example early exits and MAC counts, and a taped path used
//! for training and importance scoring.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{QuantizedTensor, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_classes: usize,
}

impl ModelConfig {
    /// Default toy profile.
    pub fn toy() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            d_head: 8,
            d_ff: 64,
            vocab_size: 16,
            max_len: 32,
            n_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_pos = self.n_layers > 0
            && self.d_model > 0
            && self.n_heads > 0
            && self.d_head > 0
            && self.d_ff > 0
            && self.vocab_size > 0
            && self.max_len > 0
            && self.n_classes > 0;
        if !all_pos {
            return Err(Error::InvalidConfig("all model dims must be positive".into()));
        }
        Ok(())
    }
}

/// Relative MAC cost of int8 vs float execution, per matmul class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub kappa_weight_matmul: f64,
    pub kappa_attention_matmul: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            kappa_weight_matmul: 0.4,
            kappa_attention_matmul: 0.8,
        }
    }
}

/// Which matmul classes run quantized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantFlags {
    pub proj: bool,
    pub attn: bool,
    pub ffn: bool,
    pub classifier: bool,
}

impl QuantFlags {
    pub fn model_quantized() -> Self {
        QuantFlags {
            proj: true,
            attn: true,
            ffn: true,
            classifier: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub heads_kept: usize,
    pub d_head: usize,
    pub ff_kept: usize,
}

/// Snapshot of everything the cost model needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_classes: usize,
    pub layers: Vec<LayerShape>,
}

/// MAC count for running `exit_layer` layers plus one classifier at a
/// padded sequence length. Embedding lookup counts as zero.
pub fn count_macs(
    shape: &ModelShape,
    seq_len: usize,
    exit_layer: usize,
    flags: &QuantFlags,
    cost: &CostModel,
) -> Result<f64> {
    if exit_layer < 1 || exit_layer > shape.layers.len() {
        return Err(Error::Precondition(format!(
            "exit_layer {exit_layer} out of range 1..={}",
            shape.layers.len()
        )));
    }
    let s = seq_len as f64;
    let d = shape.d_model as f64;
    let kw = |on: bool| if on { cost.kappa_weight_matmul } else { 1.0 };
    let ka = if flags.attn {
        cost.kappa_attention_matmul
    } else {
        1.0
    };
    let mut macs = 0.0;
    for layer in &shape.layers[..exit_layer] {
        let hd = (layer.heads_kept * layer.d_head) as f64;
        macs += 4.0 * s * d * hd * kw(flags.proj);
        macs += 2.0 * s * s * hd * ka;
        macs += 2.0 * s * d * layer.ff_kept as f64 * kw(flags.ffn);
    }
    macs += d * shape.n_classes as f64 * kw(flags.classifier);
    Ok(macs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub w: Tensor, // [d_model, n_classes]
    pub b: Tensor, // [n_classes]
}

/// Quantized copies of one layer's weight matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantLayerWeights {
    pub wq: QuantizedTensor,
    pub wk: QuantizedTensor,
    pub wv: QuantizedTensor,
    pub wo: QuantizedTensor,
    pub w1: QuantizedTensor,
    pub w2: QuantizedTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub wq: Tensor, // [d_model, heads_kept*d_head]
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor, // [heads_kept*d_head, d_model]
    pub bo: Tensor,
    pub w1: Tensor, // [d_model, ff_kept]
    pub b1: Tensor,
    pub w2: Tensor, // [ff_kept, d_model]
    pub b2: Tensor,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub heads_kept: usize,
    pub ff_kept: usize,
    pub quant: Option<QuantLayerWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerModel {
    pub cfg: ModelConfig,
    pub emb: Tensor, // [vocab, d_model]
    pub pos: Tensor, // [max_len, d_model]
    pub layers: Vec<LayerWeights>,
    pub classifier: Classifier,
    /// Intermediate exit classifiers for layers 1..n_layers-1. The final
    /// layer's exit classifier is the main classifier.
    pub exits: Option<Vec<Classifier>>,
    pub quantized: bool,
}

const LN_EPS: f64 = 1e-5;

impl TransformerModel {
    pub fn has_exits(&self) -> bool {
        self.exits.is_some()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            d_model: self.cfg.d_model,
            n_classes: self.cfg.n_classes,
            layers: self
                .layers
                .iter()
                .map(|l| LayerShape {
                    heads_kept: l.heads_kept,
                    d_head: self.cfg.d_head,
                    ff_kept: l.ff_kept,
                })
                .collect(),
        }
    }

    pub fn quant_flags(&self) -> QuantFlags {
        if self.quantized {
            QuantFlags::model_quantized()
        } else {
            QuantFlags::default()
        }
    }

    /// Exit classifier for 0-indexed layer `l`; the last layer maps to the
    /// main classifier.
    pub fn exit_classifier(&self, l: usize) -> &Classifier {
        if l + 1 == self.n_layers() {
            &self.classifier
        } else {
            &self.exits.as_ref().expect("no exits")[l]
        }
    }
}

/// Deterministic seeded initialization; no exits, no pruning, no quantization.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<TransformerModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let hd = cfg.n_heads * cfg.d_head;
    let wscale = 1.0 / (d as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerWeights {
            wq: Tensor::rand_uniform(&[d, hd], wscale, &mut rng),
            bq: Tensor::zeros(&[hd]),
            wk: Tensor::rand_uniform(&[d, hd], wscale, &mut rng),
            bk: Tensor::zeros(&[hd]),
            wv: Tensor::rand_uniform(&[d, hd], wscale, &mut rng),
            bv: Tensor::zeros(&[hd]),
            wo: Tensor::rand_uniform(&[hd, d], 1.0 / (hd as f64).sqrt(), &mut rng),
            bo: Tensor::zeros(&[d]),
            w1: Tensor::rand_uniform(&[d, cfg.d_ff], wscale, &mut rng),
            b1: Tensor::zeros(&[cfg.d_ff]),
            w2: Tensor::rand_uniform(&[cfg.d_ff, d], 1.0 / (cfg.d_ff as f64).sqrt(), &mut rng),
            b2: Tensor::zeros(&[d]),
            ln1_g: Tensor::from_vec(&[d], vec![1.0; d]),
            ln1_b: Tensor::zeros(&[d]),
            ln2_g: Tensor::from_vec(&[d], vec![1.0; d]),
            ln2_b: Tensor::zeros(&[d]),
            heads_kept: cfg.n_heads,
            ff_kept: cfg.d_ff,
            quant: None,
        });
    }
    Ok(TransformerModel {
        cfg: cfg.clone(),
        emb: Tensor::rand_uniform(&[cfg.vocab_size, d], 0.1, &mut rng),
        pos: Tensor::rand_uniform(&[cfg.max_len, d], 0.1, &mut rng),
        layers,
        classifier: Classifier {
            w: Tensor::rand_uniform(&[d, cfg.n_classes], wscale, &mut rng),
            b: Tensor::zeros(&[cfg.n_classes]),
        },
        exits: None,
        quantized: false,
    })
}

/// A padded token batch with key-validity mask.
#[derive(Debug, Clone)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub tokens: Vec<usize>, // batch * seq
    pub mask: Vec<bool>,    // batch * seq, true = real token
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_padded(seqs: &[Vec<usize>], labels: &[usize], pad_to: usize) -> Batch {
        let b = seqs.len();
        let mut tokens = vec![0usize; b * pad_to];
        let mut mask = vec![false; b * pad_to];
        for (i, s) in seqs.iter().enumerate() {
            assert!(s.len() <= pad_to);
            for (j, &t) in s.iter().enumerate() {
                tokens[i * pad_to + j] = t;
                mask[i * pad_to + j] = true;
            }
        }
        Batch {
            batch: b,
            seq: pad_to,
            tokens,
            mask,
            labels: labels.to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExampleOutput {
    pub logits: Vec<f64>,
    pub exit_layer: usize, // 1-based
    pub mac_count: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub per_example: Vec<ExampleOutput>,
    /// Logits of every computed exit, indexed [layer][example*n_classes].
    pub per_exit_logits: Vec<Vec<f64>>,
    pub mac_count: f64,
    pub wallclock_ns: Option<u128>,
}

fn softmax_max(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
    1.0 / z // max prob = exp(m - m) / z
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// x [rows, d_in] @ w [d_in, d_out] + b, float path.
fn linear(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let d_in = w.shape[0];
    let d_out = w.shape[1];
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for j in 0..d_out {
            let mut acc = b.data[j];
            for i in 0..d_in {
                acc += x[r * d_in + i] * w.data[i * d_out + j];
            }
            out[r * d_out + j] = acc;
        }
    }
    out
}

/// Row-masked dynamic activation quantization. The scale is computed
/// over valid rows only so padding rows cannot influence it (padding
/// invariance must survive quantization); invalid rows are clamped.
fn quantize_rows(
    x: &[f64],
    rows: usize,
    cols: usize,
    valid: &dyn Fn(usize) -> bool,
) -> Result<(Vec<i8>, f64)> {
    let mut max = 0.0f64;
    for r in 0..rows {
        if !valid(r) {
            continue;
        }
        for c in 0..cols {
            let v = x[r * cols + c];
            if !v.is_finite() {
                return Err(Error::NonFinite("activation quantization".into()));
            }
            max = max.max(v.abs());
        }
    }
    let scale = if max == 0.0 { 1.0 } else { max / 127.0 };
    let q = x
        .iter()
        .map(|v| ((v / scale).round() as i64).clamp(-127, 127) as i8)
        .collect();
    Ok((q, scale))
}

/// Same contract as `linear`, but with a dynamically quantized activation
/// and an int8 weight matrix.
fn qlinear(
    x: &[f64],
    rows: usize,
    w: &QuantizedTensor,
    b: &Tensor,
    valid: &dyn Fn(usize) -> bool,
) -> Result<Vec<f64>> {
    let d_in = w.shape[0];
    let d_out = w.shape[1];
    let (qx, xscale) = quantize_rows(x, rows, d_in, valid)?;
    let mut out = vec![0.0; rows * d_out];
    let s = xscale * w.scale;
    for r in 0..rows {
        for j in 0..d_out {
            let mut acc: i32 = 0;
            for i in 0..d_in {
                acc += qx[r * d_in + i] as i32 * w.qdata[i * d_out + j] as i32;
            }
            out[r * d_out + j] = acc as f64 * s + b.data[j];
        }
    }
    Ok(out)
}

fn layer_norm_inplace(x: &mut [f64], d: usize, g: &Tensor, b: &Tensor) {
    let rows = x.len() / d;
    for r in 0..rows {
        let row = &mut x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            row[j] = (row[j] - mean) * inv * g.data[j] + b.data[j];
        }
    }
}

/// Full hidden-state trace of a float forward pass; used as the teacher
/// side of distillation.
#[derive(Debug, Clone)]
pub struct ForwardStates {
    pub emb_out: Vec<f64>,          // [B*s*d]
    pub final_hidden: Vec<f64>,     // [B*s*d]
    pub exit_logits: Vec<Vec<f64>>, // per layer, [B*n_classes]; last = main classifier
}

struct LayerIo {
    hidden: Vec<f64>, // B*s*d after this layer
}

fn run_layer(
    model: &TransformerModel,
    l: usize,
    x: &[f64],
    batch: usize,
    seq: usize,
    mask: &[bool],
) -> Result<LayerIo> {
    let lw = &model.layers[l];
    let d = model.cfg.d_model;
    let heads = lw.heads_kept;
    let dh = model.cfg.d_head;
    let hd = heads * dh;
    let rows = batch * seq;
    let scale = 1.0 / (dh as f64).sqrt();
    let quant = model.quantized;

    let token_valid = |r: usize| mask[r];
    let (q, k, v) = if quant {
        let qw = lw.quant.as_ref().expect("quantized model missing qweights");
        (
            qlinear(x, rows, &qw.wq, &lw.bq, &token_valid)?,
            qlinear(x, rows, &qw.wk, &lw.bk, &token_valid)?,
            qlinear(x, rows, &qw.wv, &lw.bv, &token_valid)?,
        )
    } else {
        (
            linear(x, rows, &lw.wq, &lw.bq),
            linear(x, rows, &lw.wk, &lw.bk),
            linear(x, rows, &lw.wv, &lw.bv),
        )
    };

    // attention probabilities
    let mut probs = vec![0.0; batch * heads * seq * seq];
    if quant {
        let (qq, qq_s) = quantize_rows(&q, rows, hd, &token_valid)?;
        let (qk, qk_s) = quantize_rows(&k, rows, hd, &token_valid)?;
        let s2 = qq_s * qk_s;
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let base = ((b * heads + h) * seq + i) * seq;
                    for j in 0..seq {
                        let mut acc: i32 = 0;
                        let qo = (b * seq + i) * hd + h * dh;
                        let ko = (b * seq + j) * hd + h * dh;
                        for dd in 0..dh {
                            acc += qq[qo + dd] as i32 * qk[ko + dd] as i32;
                        }
                        probs[base + j] = acc as f64 * s2 * scale;
                    }
                }
            }
        }
    } else {
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let base = ((b * heads + h) * seq + i) * seq;
                    for j in 0..seq {
                        let mut acc = 0.0;
                        let qo = (b * seq + i) * hd + h * dh;
                        let ko = (b * seq + j) * hd + h * dh;
                        for dd in 0..dh {
                            acc += q[qo + dd] * k[ko + dd];
                        }
                        probs[base + j] = acc * scale;
                    }
                }
            }
        }
    }
    // masked softmax over keys
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq {
                let base = ((b * heads + h) * seq + i) * seq;
                let mut m = f64::NEG_INFINITY;
                for j in 0..seq {
                    if mask[b * seq + j] {
                        m = m.max(probs[base + j]);
                    }
                }
                let mut z = 0.0;
                for j in 0..seq {
                    if mask[b * seq + j] {
                        let e = (probs[base + j] - m).exp();
                        probs[base + j] = e;
                        z += e;
                    } else {
                        probs[base + j] = 0.0;
                    }
                }
                for j in 0..seq {
                    probs[base + j] /= z;
                }
            }
        }
    }

    // context = probs @ v
    let mut ctx = vec![0.0; rows * hd];
    if quant {
        // probs row r belongs to query position i = r % seq of batch b = r / (heads*seq)
        let prob_valid = |r: usize| {
            let b = r / (heads * seq);
            let i = r % seq;
            mask[b * seq + i]
        };
        let (qp, qp_s) = quantize_rows(&probs, batch * heads * seq, seq, &prob_valid)?;
        let (qv, qv_s) = quantize_rows(&v, rows, hd, &token_valid)?;
        let s2 = qp_s * qv_s;
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let pbase = ((b * heads + h) * seq + i) * seq;
                    let obase = (b * seq + i) * hd + h * dh;
                    for dd in 0..dh {
                        let mut acc: i32 = 0;
                        for j in 0..seq {
                            acc += qp[pbase + j] as i32
                                * qv[(b * seq + j) * hd + h * dh + dd] as i32;
                        }
                        ctx[obase + dd] = acc as f64 * s2;
                    }
                }
            }
        }
    } else {
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let pbase = ((b * heads + h) * seq + i) * seq;
                    let obase = (b * seq + i) * hd + h * dh;
                    for j in 0..seq {
                        let w = probs[pbase + j];
                        if w == 0.0 {
                            continue;
                        }
                        let vbase = (b * seq + j) * hd + h * dh;
                        for dd in 0..dh {
                            ctx[obase + dd] += w * v[vbase + dd];
                        }
                    }
                }
            }
        }
    }

    let attn_out = if quant {
        qlinear(&ctx, rows, &lw.quant.as_ref().unwrap().wo, &lw.bo, &token_valid)?
    } else {
        linear(&ctx, rows, &lw.wo, &lw.bo)
    };
    let mut h1: Vec<f64> = x.iter().zip(attn_out.iter()).map(|(a, b)| a + b).collect();
    layer_norm_inplace(&mut h1, d, &lw.ln1_g, &lw.ln1_b);

    let mut inter = if quant {
        qlinear(&h1, rows, &lw.quant.as_ref().unwrap().w1, &lw.b1, &token_valid)?
    } else {
        linear(&h1, rows, &lw.w1, &lw.b1)
    };
    for v in inter.iter_mut() {
        *v = v.max(0.0);
    }
    let ffn_out = if quant {
        qlinear(&inter, rows, &lw.quant.as_ref().unwrap().w2, &lw.b2, &token_valid)?
    } else {
        linear(&inter, rows, &lw.w2, &lw.b2)
    };
    let mut h2: Vec<f64> = h1.iter().zip(ffn_out.iter()).map(|(a, b)| a + b).collect();
    layer_norm_inplace(&mut h2, d, &lw.ln2_g, &lw.ln2_b);
    Ok(LayerIo { hidden: h2 })
}

fn embed_batch(model: &TransformerModel, batch: &Batch) -> Vec<f64> {
    let d = model.cfg.d_model;
    let mut x = vec![0.0; batch.batch * batch.seq * d];
    for b in 0..batch.batch {
        for j in 0..batch.seq {
            let tok = batch.tokens[b * batch.seq + j];
            let dst = (b * batch.seq + j) * d;
            for dd in 0..d {
                x[dst + dd] = model.emb.data[tok * d + dd] + model.pos.data[j * d + dd];
            }
        }
    }
    x
}

fn cls_logits(model: &TransformerModel, hidden: &[f64], batch: &Batch, cls: &Classifier) -> Vec<f64> {
    let d = model.cfg.d_model;
    let mut pooled = vec![0.0; batch.batch * d];
    for b in 0..batch.batch {
        pooled[b * d..(b + 1) * d]
            .copy_from_slice(&hidden[b * batch.seq * d..b * batch.seq * d + d]);
    }
    linear(&pooled, batch.batch, &cls.w, &cls.b)
}

/// Inference forward with optional confidence-threshold early exit.
pub fn forward(
    model: &TransformerModel,
    batch: &Batch,
    exit_threshold: Option<f64>,
    cost: &CostModel,
) -> Result<ForwardOutput> {
    if exit_threshold.is_some() && !model.has_exits() {
        return Err(Error::Precondition(
            "exit threshold given but model has no exit classifiers".into(),
        ));
    }
    for &t in &batch.tokens {
        if t >= model.cfg.vocab_size {
            return Err(Error::Precondition(format!("token id {t} out of vocab")));
        }
    }
    let start = std::time::Instant::now();
    let n_layers = model.n_layers();
    let n_classes = model.cfg.n_classes;
    let shape = model.shape();
    let flags = model.quant_flags();

    let mut x = embed_batch(model, batch);
    let mut exited: Vec<Option<(usize, Vec<f64>)>> = vec![None; batch.batch];
    let mut per_exit_logits = Vec::new();

    for l in 0..n_layers {
        let io = run_layer(model, l, &x, batch.batch, batch.seq, &batch.mask)?;
        x = io.hidden;
        let last = l + 1 == n_layers;
        let want_logits = exit_threshold.is_some() || last;
        if want_logits {
            let logits = cls_logits(model, &x, batch, model.exit_classifier(l));
            per_exit_logits.push(logits.clone());
            for b in 0..batch.batch {
                if exited[b].is_some() {
                    continue;
                }
                let row = &logits[b * n_classes..(b + 1) * n_classes];
                let take = match exit_threshold {
                    Some(thr) => last || softmax_max(row) >= thr,
                    None => last,
                };
                if take {
                    exited[b] = Some((l + 1, row.to_vec()));
                }
            }
            if exited.iter().all(|e| e.is_some()) {
                break;
            }
        }
    }

    let mut per_example = Vec::with_capacity(batch.batch);
    let mut total = 0.0;
    for e in exited.into_iter() {
        let (exit_layer, logits) = e.expect("final layer always exits");
        let macs = count_macs(&shape, batch.seq, exit_layer, &flags, cost)?;
        total += macs;
        per_example.push(ExampleOutput {
            logits,
            exit_layer,
            mac_count: macs,
        });
    }
    Ok(ForwardOutput {
        per_example,
        per_exit_logits,
        mac_count: total,
        wallclock_ns: Some(start.elapsed().as_nanos()),
    })
}

/// Float forward pass recording embeddings, final hidden state, and every
/// exit's logits (teacher side of distillation).
pub fn forward_states(model: &TransformerModel, batch: &Batch) -> Result<ForwardStates> {
    if model.quantized {
        return Err(Error::Precondition(
            "forward_states requires a float model".into(),
        ));
    }
    let mut x = embed_batch(model, batch);
    let emb_out = x.clone();
    let n_layers = model.n_layers();
    let mut exit_logits = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let io = run_layer(model, l, &x, batch.batch, batch.seq, &batch.mask)?;
        x = io.hidden;
        if model.has_exits() || l + 1 == n_layers {
            exit_logits.push(cls_logits(model, &x, batch, model.exit_classifier(l)));
        }
    }
    Ok(ForwardStates {
        emb_out,
        final_hidden: x,
        exit_logits,
    })
}

// ---------------------------------------------------------------------------
// Taped (training) forward
// ---------------------------------------------------------------------------

pub struct LayerNodes {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
}

pub struct ModelNodes {
    pub emb: NodeId,
    pub pos: NodeId,
    pub layers: Vec<LayerNodes>,
    pub cls_w: NodeId,
    pub cls_b: NodeId,
    pub exits: Vec<(NodeId, NodeId)>, // (w, b) per intermediate layer
}

/// Register every parameter of `model` as a tape leaf.
pub fn bind(tape: &mut Tape, model: &TransformerModel) -> ModelNodes {
    let layers = model
        .layers
        .iter()
        .map(|l| LayerNodes {
            wq: tape.leaf(&l.wq),
            bq: tape.leaf(&l.bq),
            wk: tape.leaf(&l.wk),
            bk: tape.leaf(&l.bk),
            wv: tape.leaf(&l.wv),
            bv: tape.leaf(&l.bv),
            wo: tape.leaf(&l.wo),
            bo: tape.leaf(&l.bo),
            w1: tape.leaf(&l.w1),
            b1: tape.leaf(&l.b1),
            w2: tape.leaf(&l.w2),
            b2: tape.leaf(&l.b2),
            ln1_g: tape.leaf(&l.ln1_g),
            ln1_b: tape.leaf(&l.ln1_b),
            ln2_g: tape.leaf(&l.ln2_g),
            ln2_b: tape.leaf(&l.ln2_b),
        })
        .collect();
    let exits = match &model.exits {
        Some(ex) => ex
            .iter()
            .map(|c| (tape.leaf(&c.w), tape.leaf(&c.b)))
            .collect(),
        None => Vec::new(),
    };
    ModelNodes {
        emb: tape.leaf(&model.emb),
        pos: tape.leaf(&model.pos),
        layers,
        cls_w: tape.leaf(&model.classifier.w),
        cls_b: tape.leaf(&model.classifier.b),
        exits,
    }
}

/// SGD step: p -= lr * grad, reading gradients back off the tape.
pub fn sgd_step(tape: &Tape, nodes: &ModelNodes, model: &mut TransformerModel, lr: f64) {
    fn upd(tape: &Tape, id: NodeId, t: &mut Tensor, lr: f64) {
        let g = tape.grad(id);
        for (p, gi) in t.data.iter_mut().zip(g.iter()) {
            *p -= lr * gi;
        }
    }
    upd(tape, nodes.emb, &mut model.emb, lr);
    upd(tape, nodes.pos, &mut model.pos, lr);
    for (ln, lw) in nodes.layers.iter().zip(model.layers.iter_mut()) {
        upd(tape, ln.wq, &mut lw.wq, lr);
        upd(tape, ln.bq, &mut lw.bq, lr);
        upd(tape, ln.wk, &mut lw.wk, lr);
        upd(tape, ln.bk, &mut lw.bk, lr);
        upd(tape, ln.wv, &mut lw.wv, lr);
        upd(tape, ln.bv, &mut lw.bv, lr);
        upd(tape, ln.wo, &mut lw.wo, lr);
        upd(tape, ln.bo, &mut lw.bo, lr);
        upd(tape, ln.w1, &mut lw.w1, lr);
        upd(tape, ln.b1, &mut lw.b1, lr);
        upd(tape, ln.w2, &mut lw.w2, lr);
        upd(tape, ln.b2, &mut lw.b2, lr);
        upd(tape, ln.ln1_g, &mut lw.ln1_g, lr);
        upd(tape, ln.ln1_b, &mut lw.ln1_b, lr);
        upd(tape, ln.ln2_g, &mut lw.ln2_g, lr);
        upd(tape, ln.ln2_b, &mut lw.ln2_b, lr);
    }
    upd(tape, nodes.cls_w, &mut model.classifier.w, lr);
    upd(tape, nodes.cls_b, &mut model.classifier.b, lr);
    if let Some(ex) = model.exits.as_mut() {
        for ((wid, bid), c) in nodes.exits.iter().zip(ex.iter_mut()) {
            upd(tape, *wid, &mut c.w, lr);
            upd(tape, *bid, &mut c.b, lr);
        }
    }
}

/// Per-layer gate nodes used by importance scoring.
pub struct LayerGates {
    pub head_gates: NodeId,
    pub ff_gates: NodeId,
}

pub struct TapedOutput {
    pub emb_out: NodeId,
    pub final_hidden: NodeId,
    /// One logits node per layer when exits exist, else just the final one.
    pub exit_logits: Vec<NodeId>,
    pub final_logits: NodeId,
}

/// Training-path forward. Mirrors the float inference math exactly.
pub fn forward_taped(
    tape: &mut Tape,
    nodes: &ModelNodes,
    model: &TransformerModel,
    batch: &Batch,
    gates: Option<&[LayerGates]>,
) -> TapedOutput {
    let d = model.cfg.d_model;
    let dh = model.cfg.d_head;
    let tok_emb = tape.embed(nodes.emb, &batch.tokens);
    let pos_ids: Vec<usize> = (0..batch.batch)
        .flat_map(|_| 0..batch.seq)
        .collect();
    let pos_emb = tape.embed(nodes.pos, &pos_ids);
    let mut x = tape.add(tok_emb, pos_emb);
    let emb_out = x;
    let n_layers = model.n_layers();
    let mut exit_logits = Vec::new();

    for (l, (ln, lw)) in nodes.layers.iter().zip(model.layers.iter()).enumerate() {
        let heads = lw.heads_kept;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = tape.linear(x, ln.wq, ln.bq);
        let k = tape.linear(x, ln.wk, ln.bk);
        let v = tape.linear(x, ln.wv, ln.bv);
        let scores = tape.attn_scores(q, k, batch.batch, batch.seq, heads, dh, scale);
        let probs = tape.masked_softmax(scores, &batch.mask, batch.batch, heads, batch.seq);
        let mut ctx = tape.attn_context(probs, v, batch.batch, batch.seq, heads, dh);
        if let Some(gs) = gates {
            ctx = tape.gate_heads(ctx, gs[l].head_gates, heads, dh);
        }
        let attn_out = tape.linear(ctx, ln.wo, ln.bo);
        let res1 = tape.add(x, attn_out);
        let h1 = tape.layer_norm(res1, ln.ln1_g, ln.ln1_b, LN_EPS);
        let pre = tape.linear(h1, ln.w1, ln.b1);
        let mut act = tape.relu(pre);
        if let Some(gs) = gates {
            act = tape.gate_units(act, gs[l].ff_gates);
        }
        let ffn_out = tape.linear(act, ln.w2, ln.b2);
        let res2 = tape.add(h1, ffn_out);
        x = tape.layer_norm(res2, ln.ln2_g, ln.ln2_b, LN_EPS);

        let want = model.has_exits() || l + 1 == n_layers;
        if want {
            let pooled = tape.select_token0(x, batch.batch, batch.seq, d);
            let (wid, bid) = if l + 1 == n_layers {
                (nodes.cls_w, nodes.cls_b)
            } else {
                nodes.exits[l]
            };
            exit_logits.push(tape.linear(pooled, wid, bid));
        }
    }
    let final_logits = *exit_logits.last().unwrap();
    TapedOutput {
        emb_out,
        final_hidden: x,
        exit_logits,
        final_logits,
    }
}
