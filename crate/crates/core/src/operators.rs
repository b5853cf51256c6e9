//! The five efficiency operators D, P, E, L, Q as model transformations.
//!
//! D, P, E involve additional training; Q is inference-time only. L is a
//! batching policy and lives in `evalbench::measure_point` — marking an
//! artifact with the L flag only changes measurement.

use crate::error::{Error, Result};
use crate::model::{
    bind, forward_states, forward_taped, sgd_step, Batch, Classifier, LayerGates,
    QuantLayerWeights, TransformerModel,
};
use crate::tape::Tape;
use crate::task::Example;
use crate::tensor::{quantize, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("train config must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// (soft cross-entropy, embedding MSE, final-layer MSE)
    pub loss_weights: (f64, f64, f64),
    pub layer_map_stride: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            loss_weights: (1.0, 1.0, 1.0),
            layer_map_stride: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub heads_keep_per_layer: usize,
    pub ff_keep_per_layer: usize,
}

impl PruneConfig {
    /// Toy default preserving the 2/3 head and 1/2 FFN keep ratios.
    pub fn toy() -> Self {
        PruneConfig {
            heads_keep_per_layer: 3,
            ff_keep_per_layer: 32,
        }
    }
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig::toy()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    pub heads: Vec<f64>,
    pub ff: Vec<f64>,
}

/// Accumulated first-order importance per head and FFN unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub layers: Vec<LayerImportance>,
}

/// Epoch-mean training losses, for monotonicity checks and logging.
#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub epoch_losses: Vec<f64>,
}

/// Outputs that feed the distillation loss.
#[derive(Debug, Clone)]
pub struct DistillOutputs {
    /// Logits per supervised exit (one entry when no exits), [B*C] each.
    pub exit_logits: Vec<Vec<f64>>,
    pub n_classes: usize,
    pub batch: usize,
    pub emb_out: Vec<f64>,
    pub final_hidden: Vec<f64>,
}

fn soft_ce(teacher_logits: &[f64], student_logits: &[f64], batch: usize, c: usize) -> f64 {
    let mut loss = 0.0;
    let mut pt = vec![0.0; c];
    let mut ps = vec![0.0; c];
    for i in 0..batch {
        softmax_into(&teacher_logits[i * c..(i + 1) * c], &mut pt);
        softmax_into(&student_logits[i * c..(i + 1) * c], &mut ps);
        for j in 0..c {
            loss -= pt[j] * ps[j].max(1e-300).ln();
        }
    }
    loss / batch as f64
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        *o = (x - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64
}

/// Three-part distillation loss: w1 * softCE over supervised exits
/// + w2 * MSE(embedding outputs) + w3 * MSE(final layer outputs).
pub fn distill_loss(
    teacher: &DistillOutputs,
    student: &DistillOutputs,
    weights: (f64, f64, f64),
) -> Result<f64> {
    if teacher.exit_logits.len() != student.exit_logits.len()
        || teacher.emb_out.len() != student.emb_out.len()
        || teacher.final_hidden.len() != student.final_hidden.len()
    {
        return Err(Error::ShapeMismatch("distill_loss outputs".into()));
    }
    let mut ce = 0.0;
    for (t, s) in teacher.exit_logits.iter().zip(student.exit_logits.iter()) {
        ce += soft_ce(t, s, teacher.batch, teacher.n_classes);
    }
    Ok(weights.0 * ce
        + weights.1 * mse(&teacher.emb_out, &student.emb_out)
        + weights.2 * mse(&teacher.final_hidden, &student.final_hidden))
}

/// Deterministic epoch batching: seeded shuffle, fixed-size chunks, padded
/// to the longest sequence in each chunk.
fn epoch_batches(data: &[Example], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size)
        .map(|chunk| {
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| data[i].tokens.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
            let pad = seqs.iter().map(|s| s.len()).max().unwrap();
            Batch::from_padded(&seqs, &labels, pad)
        })
        .collect()
}

/// Fine-tune with plain cross-entropy on the main classifier (the "O"
/// training stage).
pub fn train_classifier(
    model: &mut TransformerModel,
    data: &[Example],
    tcfg: &TrainConfig,
) -> Result<TrainStats> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData("training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut stats = TrainStats::default();
    for _ in 0..tcfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data, tcfg.batch_size, &mut rng);
        let n = batches.len();
        for batch in batches {
            let mut tape = Tape::new();
            let nodes = bind(&mut tape, model);
            let out = forward_taped(&mut tape, &nodes, model, &batch, None);
            let loss = tape.cross_entropy(out.final_logits, &batch.labels);
            total += tape.scalar(loss);
            tape.backward(loss)?;
            sgd_step(&tape, &nodes, model, tcfg.learning_rate);
        }
        stats.epoch_losses.push(total / n as f64);
    }
    Ok(stats)
}

/// Shared distillation loop. `exit_map[j]` is the teacher layer (0-indexed)
/// supervising the student's j-th exit; when neither model has exit
/// classifiers, only the final logits are supervised.
fn distill_train(
    teacher: &TransformerModel,
    student: &mut TransformerModel,
    exit_map: &[usize],
    data: &[Example],
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
) -> Result<TrainStats> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData("distillation set".into()));
    }
    let (w1, w2, w3) = dcfg.loss_weights;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut stats = TrainStats::default();
    for _ in 0..tcfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data, tcfg.batch_size, &mut rng);
        let n = batches.len();
        for batch in batches {
            let tstates = forward_states(teacher, &batch)?;
            let mut tape = Tape::new();
            let nodes = bind(&mut tape, student);
            let out = forward_taped(&mut tape, &nodes, student, &batch, None);

            let mut terms = Vec::new();
            if student.has_exits() {
                for (j, &tl) in exit_map.iter().enumerate() {
                    let tnode = tape.leaf_from(
                        &[batch.batch, student.cfg.n_classes],
                        tstates.exit_logits[tl].clone(),
                    );
                    let sce = tape.soft_cross_entropy(tnode, out.exit_logits[j]);
                    terms.push((sce, w1));
                }
            } else {
                let tnode = tape.leaf_from(
                    &[batch.batch, student.cfg.n_classes],
                    tstates.exit_logits.last().unwrap().clone(),
                );
                let sce = tape.soft_cross_entropy(tnode, out.final_logits);
                terms.push((sce, w1));
            }
            let emb_shape = [batch.batch * batch.seq, student.cfg.d_model];
            let temb = tape.leaf_from(&emb_shape, tstates.emb_out.clone());
            let m_emb = tape.mse(out.emb_out, temb);
            terms.push((m_emb, w2));
            let tfin = tape.leaf_from(&emb_shape, tstates.final_hidden.clone());
            let m_fin = tape.mse(out.final_hidden, tfin);
            terms.push((m_fin, w3));

            let loss = tape.weighted_sum(&terms);
            total += tape.scalar(loss);
            tape.backward(loss)?;
            sgd_step(&tape, &nodes, student, tcfg.learning_rate);
        }
        stats.epoch_losses.push(total / n as f64);
    }
    Ok(stats)
}

/// Distill a teacher into a student of depth teacher_depth / stride.
/// Student layer i is initialized from and supervised by teacher layer
/// stride*i (1-indexed).
pub fn apply_distill(
    teacher: &TransformerModel,
    data: &[Example],
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
) -> Result<(TransformerModel, TrainStats)> {
    let stride = dcfg.layer_map_stride;
    let depth = teacher.n_layers();
    if stride == 0 || depth % stride != 0 {
        return Err(Error::Precondition(format!(
            "teacher depth {depth} not divisible by stride {stride}"
        )));
    }
    let sd = depth / stride;
    let mut cfg = teacher.cfg.clone();
    cfg.n_layers = sd;
    let layer_map: Vec<usize> = (0..sd).map(|j| stride * (j + 1) - 1).collect();

    let mut student = TransformerModel {
        cfg,
        emb: teacher.emb.clone(),
        pos: teacher.pos.clone(),
        layers: layer_map.iter().map(|&tl| teacher.layers[tl].clone()).collect(),
        classifier: teacher.classifier.clone(),
        exits: teacher.exits.as_ref().map(|_| {
            layer_map[..sd - 1]
                .iter()
                .map(|&tl| teacher.exit_classifier(tl).clone())
                .collect()
        }),
        quantized: false,
    };
    let stats = distill_train(teacher, &mut student, &layer_map, data, dcfg, tcfg)?;
    Ok((student, stats))
}

/// Accumulated |dL/dgate| over the dev set, one gate per attention head
/// and per FFN intermediate unit. The model is left unchanged.
pub fn compute_importance(
    model: &TransformerModel,
    dev_data: &[Example],
) -> Result<ImportanceScores> {
    if dev_data.is_empty() {
        return Err(Error::EmptyData("dev set".into()));
    }
    let mut scores: Vec<LayerImportance> = model
        .layers
        .iter()
        .map(|l| LayerImportance {
            heads: vec![0.0; l.heads_kept],
            ff: vec![0.0; l.ff_kept],
        })
        .collect();
    // One example per pass so scores are exactly additive over the dataset.
    for ex in dev_data {
        let batch = Batch::from_padded(
            std::slice::from_ref(&ex.tokens),
            &[ex.label],
            ex.tokens.len(),
        );
        let mut tape = Tape::new();
        let nodes = bind(&mut tape, model);
        let gates: Vec<LayerGates> = model
            .layers
            .iter()
            .map(|l| LayerGates {
                head_gates: tape.leaf_from(&[l.heads_kept], vec![1.0; l.heads_kept]),
                ff_gates: tape.leaf_from(&[l.ff_kept], vec![1.0; l.ff_kept]),
            })
            .collect();
        let out = forward_taped(&mut tape, &nodes, model, &batch, Some(&gates));
        let loss = if model.has_exits() {
            let terms: Vec<_> = out
                .exit_logits
                .iter()
                .map(|&lg| (tape.cross_entropy(lg, &batch.labels), 1.0))
                .collect();
            tape.weighted_sum(&terms)
        } else {
            tape.cross_entropy(out.final_logits, &batch.labels)
        };
        tape.backward(loss)?;
        for (l, g) in gates.iter().enumerate() {
            for (h, s) in tape.grad(g.head_gates).iter().enumerate() {
                scores[l].heads[h] += s.abs();
            }
            for (u, s) in tape.grad(g.ff_gates).iter().enumerate() {
                scores[l].ff[u] += s.abs();
            }
        }
    }
    Ok(ImportanceScores { layers: scores })
}

/// Indices of the `keep` highest-scoring entries, ties broken by lower
/// index, returned in ascending index order.
fn top_k_indices(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = idx.into_iter().take(keep).collect();
    kept.sort_unstable();
    kept
}

fn slice_cols(t: &Tensor, groups: &[usize], group_size: usize) -> Tensor {
    let rows = t.shape[0];
    let cols = t.shape[1];
    let new_cols = groups.len() * group_size;
    let mut data = Vec::with_capacity(rows * new_cols);
    for r in 0..rows {
        for &g in groups {
            for c in 0..group_size {
                data.push(t.data[r * cols + g * group_size + c]);
            }
        }
    }
    Tensor::from_vec(&[rows, new_cols], data)
}

fn slice_rows(t: &Tensor, groups: &[usize], group_size: usize) -> Tensor {
    let cols = t.shape[1];
    let mut data = Vec::with_capacity(groups.len() * group_size * cols);
    for &g in groups {
        for r in 0..group_size {
            data.extend_from_slice(&t.data[(g * group_size + r) * cols..(g * group_size + r + 1) * cols]);
        }
    }
    Tensor::from_vec(&[groups.len() * group_size, cols], data)
}

fn slice_vec(t: &Tensor, groups: &[usize], group_size: usize) -> Tensor {
    let mut data = Vec::with_capacity(groups.len() * group_size);
    for &g in groups {
        data.extend_from_slice(&t.data[g * group_size..(g + 1) * group_size]);
    }
    Tensor::from_vec(&[groups.len() * group_size], data)
}

/// Remove the lowest-importance heads and FFN units, rewire the weight
/// matrices into a smaller dense model, then distill from the unpruned
/// model (same depth, layer-for-layer supervision). Exit classifiers are
/// not changed by the pruning step.
pub fn apply_prune(
    model: &TransformerModel,
    scores: &ImportanceScores,
    pcfg: &PruneConfig,
    data: &[Example],
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
) -> Result<(TransformerModel, TrainStats)> {
    if scores.layers.len() != model.n_layers() {
        return Err(Error::ShapeMismatch("importance scores vs model".into()));
    }
    let dh = model.cfg.d_head;
    let mut identity = true;
    for (l, lw) in model.layers.iter().enumerate() {
        if scores.layers[l].heads.len() != lw.heads_kept
            || scores.layers[l].ff.len() != lw.ff_kept
        {
            return Err(Error::ShapeMismatch(format!("scores for layer {l}")));
        }
        if pcfg.heads_keep_per_layer > lw.heads_kept || pcfg.ff_keep_per_layer > lw.ff_kept {
            return Err(Error::Precondition(format!(
                "keep counts exceed available units in layer {l}"
            )));
        }
        if pcfg.heads_keep_per_layer == 0 || pcfg.ff_keep_per_layer == 0 {
            return Err(Error::Precondition("keep counts must be >= 1".into()));
        }
        if pcfg.heads_keep_per_layer < lw.heads_kept || pcfg.ff_keep_per_layer < lw.ff_kept {
            identity = false;
        }
    }
    if identity {
        return Ok((model.clone(), TrainStats::default()));
    }

    let mut pruned = model.clone();
    for (l, lw) in pruned.layers.iter_mut().enumerate() {
        let heads = top_k_indices(&scores.layers[l].heads, pcfg.heads_keep_per_layer);
        let units = top_k_indices(&scores.layers[l].ff, pcfg.ff_keep_per_layer);
        lw.wq = slice_cols(&lw.wq, &heads, dh);
        lw.bq = slice_vec(&lw.bq, &heads, dh);
        lw.wk = slice_cols(&lw.wk, &heads, dh);
        lw.bk = slice_vec(&lw.bk, &heads, dh);
        lw.wv = slice_cols(&lw.wv, &heads, dh);
        lw.bv = slice_vec(&lw.bv, &heads, dh);
        lw.wo = slice_rows(&lw.wo, &heads, dh);
        lw.w1 = slice_cols(&lw.w1, &units, 1);
        lw.b1 = slice_vec(&lw.b1, &units, 1);
        lw.w2 = slice_rows(&lw.w2, &units, 1);
        lw.heads_kept = pcfg.heads_keep_per_layer;
        lw.ff_kept = pcfg.ff_keep_per_layer;
    }
    // post-prune distillation from the unpruned model, layer i <- layer i
    let layer_map: Vec<usize> = (0..model.n_layers()).collect();
    let stats = distill_train(model, &mut pruned, &layer_map, data, dcfg, tcfg)?;
    Ok((pruned, stats))
}

/// Attach one exit classifier per intermediate layer and train the whole
/// model on the sum of all exits' cross-entropy losses.
pub fn apply_early_exit(
    model: &TransformerModel,
    data: &[Example],
    tcfg: &TrainConfig,
) -> Result<(TransformerModel, TrainStats)> {
    if model.has_exits() {
        return Err(Error::Precondition("model already has exit classifiers".into()));
    }
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData("training set".into()));
    }
    let mut trained = model.clone();
    let d = model.cfg.d_model;
    let c = model.cfg.n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5ee7);
    trained.exits = Some(
        (0..model.n_layers() - 1)
            .map(|_| Classifier {
                w: Tensor::rand_uniform(&[d, c], 1.0 / (d as f64).sqrt(), &mut rng),
                b: Tensor::zeros(&[c]),
            })
            .collect(),
    );

    let mut data_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut stats = TrainStats::default();
    for _ in 0..tcfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data, tcfg.batch_size, &mut data_rng);
        let n = batches.len();
        for batch in batches {
            let mut tape = Tape::new();
            let nodes = bind(&mut tape, &trained);
            let out = forward_taped(&mut tape, &nodes, &trained, &batch, None);
            let terms: Vec<_> = out
                .exit_logits
                .iter()
                .map(|&lg| (tape.cross_entropy(lg, &batch.labels), 1.0))
                .collect();
            let loss = tape.weighted_sum(&terms);
            total += tape.scalar(loss);
            tape.backward(loss)?;
            sgd_step(&tape, &nodes, &mut trained, tcfg.learning_rate);
        }
        stats.epoch_losses.push(total / n as f64);
    }
    Ok((trained, stats))
}

/// Replace every attention and FFN weight matrix by its symmetric int8
/// form. Embeddings, layer norms, and classifiers stay float.
pub fn apply_quantize(model: &TransformerModel) -> Result<TransformerModel> {
    if model.quantized {
        return Err(Error::Precondition("model is already quantized".into()));
    }
    let mut q = model.clone();
    for lw in q.layers.iter_mut() {
        lw.quant = Some(QuantLayerWeights {
            wq: quantize(&lw.wq)?,
            wk: quantize(&lw.wk)?,
            wv: quantize(&lw.wv)?,
            wo: quantize(&lw.wo)?,
            w1: quantize(&lw.w1)?,
            w2: quantize(&lw.w2)?,
        });
    }
    q.quantized = true;
    Ok(q)
}
