//! Measurement bench: batched accuracy/cost points, tradeoff curves,
//! the curve-distance metric, and the commutativity experiment harness.
//!
//! Dynamic length (operator L) lives here: an artifact with the L flag is
//! measured with each batch padded only to its own maximum length.

use crate::error::{Error, Result};
use crate::model::{argmax, forward, init_model, Batch, CostModel, ModelConfig};
use crate::operators::train_classifier;
use crate::pipeline::{execute, validate, ModelArtifact, OpCode, OpConfigs, Provenance, Registry};
use crate::task::{gen_task, Example, SyntheticTask};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    /// Mean MACs per example.
    pub time_cost: f64,
    /// Fraction correct on the test set.
    pub accuracy: f64,
    /// Early-exit threshold that produced the point, if any.
    pub threshold: Option<f64>,
    pub avg_exit_layer: f64,
    pub wallclock_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    /// Sorted by time_cost ascending.
    pub points: Vec<TradeoffPoint>,
}

impl TradeoffCurve {
    /// Minimum time on the curve (the exit-after-one-layer point).
    pub fn t_e(&self) -> f64 {
        self.points[0].time_cost
    }

    pub fn time_range(&self) -> (f64, f64) {
        (
            self.points[0].time_cost,
            self.points[self.points.len() - 1].time_cost,
        )
    }

    /// Piecewise-linear accuracy at time `t` (t must lie in range).
    pub fn accuracy_at(&self, t: f64) -> f64 {
        let pts = &self.points;
        if t <= pts[0].time_cost {
            return pts[0].accuracy;
        }
        for w in pts.windows(2) {
            if t <= w[1].time_cost {
                let span = w[1].time_cost - w[0].time_cost;
                if span == 0.0 {
                    return w[1].accuracy;
                }
                let f = (t - w[0].time_cost) / span;
                return w[0].accuracy + f * (w[1].accuracy - w[0].accuracy);
            }
        }
        pts[pts.len() - 1].accuracy
    }
}

pub fn default_thresholds() -> Vec<f64> {
    vec![0.0, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 1.01]
}

/// Measure accuracy and mean MACs of an artifact on a test set.
///
/// With the L flag, each batch is padded to its own max length; otherwise
/// to the model's fixed max_len.
pub fn measure_point(
    artifact: &ModelArtifact,
    test: &[Example],
    batch_size: usize,
    threshold: Option<f64>,
    cost: &CostModel,
) -> Result<TradeoffPoint> {
    if test.is_empty() {
        return Err(Error::EmptyData("test set".into()));
    }
    if artifact.model.has_exits() && threshold.is_none() {
        return Err(Error::Precondition(
            "multi-exit artifact needs a fixed threshold for a point measurement".into(),
        ));
    }
    let start = std::time::Instant::now();
    let mut correct = 0usize;
    let mut total_macs = 0.0;
    let mut total_exit = 0usize;
    for chunk in test.chunks(batch_size) {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|e| e.tokens.clone()).collect();
        let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        let max_in_batch = seqs.iter().map(|s| s.len()).max().unwrap();
        if max_in_batch > artifact.model.cfg.max_len {
            return Err(Error::Precondition("sequence longer than model max_len".into()));
        }
        let pad = if artifact.l_flag {
            max_in_batch
        } else {
            artifact.model.cfg.max_len
        };
        let batch = Batch::from_padded(&seqs, &labels, pad);
        let out = forward(&artifact.model, &batch, threshold, cost)?;
        for (ex, &label) in out.per_example.iter().zip(labels.iter()) {
            if argmax(&ex.logits) == label {
                correct += 1;
            }
            total_macs += ex.mac_count;
            total_exit += ex.exit_layer;
        }
    }
    let n = test.len() as f64;
    Ok(TradeoffPoint {
        time_cost: total_macs / n,
        accuracy: correct as f64 / n,
        threshold,
        avg_exit_layer: total_exit as f64 / n,
        wallclock_ms: start.elapsed().as_secs_f64() * 1e3 / n,
    })
}

/// One point per threshold, sorted by time cost.
pub fn measure_curve(
    artifact: &ModelArtifact,
    test: &[Example],
    thresholds: &[f64],
    batch_size: usize,
    cost: &CostModel,
) -> Result<TradeoffCurve> {
    if !artifact.model.has_exits() {
        return Err(Error::Precondition(
            "curve measurement requires exit classifiers".into(),
        ));
    }
    if thresholds.is_empty() {
        return Err(Error::Precondition("empty threshold grid".into()));
    }
    let mut points = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        points.push(measure_point(artifact, test, batch_size, Some(t), cost)?);
    }
    points.sort_by(|a, b| a.time_cost.partial_cmp(&b.time_cost).unwrap());
    Ok(TradeoffCurve { points })
}

/// Maximum accuracy difference (in accuracy points, x100) between two
/// curves, evaluated on a 100-point uniform grid over the intersection of
/// their time ranges with linear interpolation.
pub fn curve_distance(c1: &TradeoffCurve, c2: &TradeoffCurve) -> Result<f64> {
    let (lo1, hi1) = c1.time_range();
    let (lo2, hi2) = c2.time_range();
    let lo = lo1.max(lo2);
    let hi = hi1.min(hi2);
    if lo > hi {
        return Err(Error::Precondition("curve time ranges do not overlap".into()));
    }
    let mut max_diff = 0.0_f64;
    const GRID: usize = 100;
    for i in 0..GRID {
        let t = if GRID == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (GRID - 1) as f64
        };
        let d = (c1.accuracy_at(t) - c2.accuracy_at(t)).abs();
        max_diff = max_diff.max(d);
    }
    Ok(max_diff * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairGroup {
    SameOrder,
    DifferentOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub group: PairGroup,
    pub mean: f64,
    pub sd: f64,
    pub n_pairs: usize,
}

fn stats_of(distances: &[f64], group: PairGroup) -> DistanceStats {
    let n = distances.len();
    let mean = distances.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (distances.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    DistanceStats {
        group,
        mean,
        sd,
        n_pairs: n,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommuteReport {
    pub task: String,
    pub operator_set: String,
    pub orderings: Vec<String>,
    pub same_order: DistanceStats,
    pub different_order: DistanceStats,
    /// Whether the 1-SD intervals of the two groups overlap.
    pub overlap_1sd: bool,
}

/// All orderings of an operator set that pass validation.
pub fn valid_orderings(ops: &[OpCode]) -> Vec<Vec<OpCode>> {
    fn perms(items: &[OpCode]) -> Vec<Vec<OpCode>> {
        if items.is_empty() {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for (i, &c) in items.iter().enumerate() {
            let mut rest = items.to_vec();
            rest.remove(i);
            for mut p in perms(&rest) {
                p.insert(0, c);
                out.push(p);
            }
        }
        out
    }
    perms(ops)
        .into_iter()
        .filter(|p| validate(&crate::pipeline::PipelineSpec { ops: p.clone() }).is_empty())
        .collect()
}

/// Train (or load from the registry) the fine-tuned base "O" artifact for
/// one seed.
pub fn prepare_base(
    task_spec: &SyntheticTask,
    model_cfg: &ModelConfig,
    cfgs: &OpConfigs,
    seed: u64,
    registry: Option<&mut Registry>,
) -> Result<ModelArtifact> {
    let task_name = task_spec.name().to_string();
    if let Some(reg) = &registry {
        if let Some(art) = reg.load(&task_name, seed, "O")? {
            return Ok(art);
        }
    }
    let data = gen_task(task_spec)?;
    let mut model = init_model(model_cfg, seed)?;
    let tcfg = cfgs.train.with_seed(seed);
    train_classifier(&mut model, &data.train, &tcfg)?;
    let art = ModelArtifact {
        model,
        provenance: Provenance {
            task: task_name,
            seed,
            pipeline: "O".into(),
        },
        l_flag: false,
    };
    if let Some(reg) = registry {
        reg.store(&art)?;
    }
    Ok(art)
}

/// Run every valid ordering of `ops` for every seed and compare tradeoff
/// curves within and across orderings (one curve per run).
#[allow(clippy::too_many_arguments)]
pub fn commutativity_report(
    ops: &[OpCode],
    seeds: &[u64],
    task_spec: &SyntheticTask,
    model_cfg: &ModelConfig,
    cfgs: &OpConfigs,
    cost: &CostModel,
    thresholds: &[f64],
    batch_size: usize,
    mut registry: Option<&mut Registry>,
) -> Result<CommuteReport> {
    if !ops.contains(&OpCode::E) {
        return Err(Error::Precondition(
            "commutativity report needs E in the operator set (curves require exits)".into(),
        ));
    }
    if seeds.len() < 2 {
        return Err(Error::Precondition("need at least 2 seeds".into()));
    }
    let orderings = valid_orderings(ops);
    let data = gen_task(task_spec)?;
    // curves[o][s]
    let mut curves: Vec<Vec<TradeoffCurve>> = Vec::with_capacity(orderings.len());
    for ordering in &orderings {
        let spec = crate::pipeline::PipelineSpec {
            ops: ordering.clone(),
        };
        let mut row = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let base = prepare_base(task_spec, model_cfg, cfgs, seed, registry.as_deref_mut())?;
            let art = execute(&spec, &base, &data, cfgs, registry.as_deref_mut())?;
            row.push(measure_curve(&art, &data.test, thresholds, batch_size, cost)?);
        }
        curves.push(row);
    }

    let mut same = Vec::new();
    for row in &curves {
        for i in 0..row.len() {
            for j in i + 1..row.len() {
                same.push(curve_distance(&row[i], &row[j])?);
            }
        }
    }
    let mut diff = Vec::new();
    for a in 0..curves.len() {
        for b in a + 1..curves.len() {
            for ca in &curves[a] {
                for cb in &curves[b] {
                    diff.push(curve_distance(ca, cb)?);
                }
            }
        }
    }
    let same_order = stats_of(&same, PairGroup::SameOrder);
    let different_order = stats_of(&diff, PairGroup::DifferentOrder);
    let overlap_1sd = (same_order.mean - different_order.mean).abs()
        <= same_order.sd + different_order.sd;
    Ok(CommuteReport {
        task: task_spec.name().into(),
        operator_set: {
            let mut s: Vec<char> = ops.iter().map(|o| o.letter()).collect();
            s.sort_unstable();
            s.into_iter().collect()
        },
        orderings: orderings
            .iter()
            .map(|o| {
                crate::pipeline::PipelineSpec { ops: o.clone() }.to_string()
            })
            .collect(),
        same_order,
        different_order,
        overlap_1sd,
    })
}

// ---------------------------------------------------------------------------
// CSV formats
// ---------------------------------------------------------------------------

pub const CURVE_CSV_HEADER: &str = "threshold,avg_exit_layer,mean_macs,wallclock_ms,accuracy";

pub fn curve_to_csv(curve: &TradeoffCurve) -> String {
    let mut out = String::from(CURVE_CSV_HEADER);
    out.push('\n');
    for p in &curve.points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.threshold.map_or(String::new(), |t| t.to_string()),
            p.avg_exit_layer,
            p.time_cost,
            p.wallclock_ms,
            p.accuracy
        ));
    }
    out
}

pub fn curve_from_csv(text: &str) -> Result<TradeoffCurve> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty curve csv".into()))?;
    if header.trim() != CURVE_CSV_HEADER {
        return Err(Error::Parse(format!("unexpected curve csv header: {header}")));
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::Parse(format!("curve csv row {}: bad column count", i + 2)));
        }
        let f = |s: &str, name: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("curve csv row {}: bad {name}", i + 2)))
        };
        points.push(TradeoffPoint {
            threshold: if cols[0].trim().is_empty() {
                None
            } else {
                Some(f(cols[0], "threshold")?)
            },
            avg_exit_layer: f(cols[1], "avg_exit_layer")?,
            time_cost: f(cols[2], "mean_macs")?,
            wallclock_ms: f(cols[3], "wallclock_ms")?,
            accuracy: f(cols[4], "accuracy")?,
        });
    }
    if points.is_empty() {
        return Err(Error::Parse("curve csv has no points".into()));
    }
    points.sort_by(|a, b| a.time_cost.partial_cmp(&b.time_cost).unwrap());
    Ok(TradeoffCurve { points })
}

pub const REPORT_CSV_HEADER: &str = "dataset,operator_set,group,mean,sd,n_pairs,overlap_1sd";

pub fn commute_report_to_csv(r: &CommuteReport) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for (group, s) in [
        ("same-order", &r.same_order),
        ("different-order", &r.different_order),
    ] {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{},{}\n",
            r.task, r.operator_set, group, s.mean, s.sd, s.n_pairs, r.overlap_1sd
        ));
    }
    out
}
