//! Closed-form pipeline estimation from single-operator measurements.
//!
//! Accuracy composes multiplicatively as relative ratios against the base
//! model. Time composes per operator: width reduction scales the whole
//! curve, depth reduction preserves the one-layer exit floor, and the
//! inference-time operators (quantization, dynamic length) multiply in
//! their measured savings. Pruning + quantization interact and must be
//! measured jointly ("PQ" compound record) before they can be composed.

use crate::error::{Error, Result};
use crate::evalbench::{TradeoffCurve, TradeoffPoint};
use crate::pipeline::{validate, OpCode, PipelineSpec};
use serde::{Deserialize, Serialize};
use std::path::Path;

// ---------------------------------------------------------------------------
// Measurement store
// ---------------------------------------------------------------------------

/// One curve point in the on-disk store format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoreCurvePoint {
    pub threshold: f64,
    pub time: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub task: String,
    pub seed: u64,
    pub pipeline: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub point: Option<TradeoffPoint>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub curve: Option<Vec<StoreCurvePoint>>,
}

impl MeasurementRecord {
    pub fn key(&self) -> (String, u64, String) {
        (self.task.clone(), self.seed, self.pipeline.clone())
    }
}

/// JSON-array-backed store of measured points and curves, keyed by
/// (task, seed, pipeline).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeasurementStore {
    pub records: Vec<MeasurementRecord>,
}

impl MeasurementStore {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let store: MeasurementStore = serde_json::from_str(&text)?;
        store.check_unique()?;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(&self)?)?;
        Ok(())
    }

    fn check_unique(&self) -> Result<()> {
        for (i, a) in self.records.iter().enumerate() {
            for b in &self.records[i + 1..] {
                if a.key() == b.key() {
                    return Err(Error::Precondition(format!(
                        "duplicate measurement key {}/{}/{}",
                        a.task, a.seed, a.pipeline
                    )));
                }
            }
        }
        Ok(())
    }

    /// Insert or replace the record with the same key.
    pub fn upsert(&mut self, rec: MeasurementRecord) {
        if let Some(slot) = self.records.iter_mut().find(|r| r.key() == rec.key()) {
            *slot = rec;
        } else {
            self.records.push(rec);
        }
    }

    pub fn get(&self, task: &str, seed: u64, pipeline: &str) -> Option<&MeasurementRecord> {
        self.records
            .iter()
            .find(|r| r.task == task && r.seed == seed && r.pipeline == pipeline)
    }

    pub fn record_point(
        &mut self,
        task: &str,
        seed: u64,
        pipeline: &str,
        point: TradeoffPoint,
    ) {
        self.upsert(MeasurementRecord {
            task: task.into(),
            seed,
            pipeline: pipeline.into(),
            point: Some(point),
            curve: None,
        });
    }

    pub fn record_curve(&mut self, task: &str, seed: u64, pipeline: &str, curve: &TradeoffCurve) {
        self.upsert(MeasurementRecord {
            task: task.into(),
            seed,
            pipeline: pipeline.into(),
            point: None,
            curve: Some(
                curve
                    .points
                    .iter()
                    .map(|p| StoreCurvePoint {
                        threshold: p.threshold.unwrap_or(f64::NAN),
                        time: p.time_cost,
                        accuracy: p.accuracy,
                    })
                    .collect(),
            ),
        });
    }
}

pub fn store_curve_to_tradeoff(points: &[StoreCurvePoint]) -> TradeoffCurve {
    let mut pts: Vec<TradeoffPoint> = points
        .iter()
        .map(|p| TradeoffPoint {
            time_cost: p.time,
            accuracy: p.accuracy,
            threshold: if p.threshold.is_nan() {
                None
            } else {
                Some(p.threshold)
            },
            avg_exit_layer: 0.0,
            wallclock_ms: 0.0,
        })
        .collect();
    pts.sort_by(|a, b| a.time_cost.partial_cmp(&b.time_cost).unwrap());
    TradeoffCurve { points: pts }
}

// ---------------------------------------------------------------------------
// Composition rules
// ---------------------------------------------------------------------------

/// Relative-drop accuracy composition: scale A_R by the operator's
/// accuracy ratio against the base model.
pub fn est_accuracy(a_r: f64, a_op: f64, a_base: f64) -> Result<f64> {
    if a_base <= 0.0 {
        return Err(Error::Precondition("base accuracy must be positive".into()));
    }
    Ok(a_op / a_base * a_r)
}

fn check_ratio(r: f64, name: &str) -> Result<()> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Precondition(format!(
            "{name} time ratio {r} outside (0, 1]"
        )));
    }
    Ok(())
}

/// Estimated times for each point of an exit curve after adding depth
/// reduction (distillation ratio) and/or width reduction (pruning ratio).
///
/// Depth reduction interpolates between the one-layer exit floor t_E
/// (no extra saving possible) and the full-depth point (full ratio
/// applies). Width reduction scales every point uniformly.
pub fn est_time(
    curve_e: &TradeoffCurve,
    t_d_ratio: Option<f64>,
    t_p_ratio: Option<f64>,
) -> Result<Vec<f64>> {
    if curve_e.points.is_empty() {
        return Err(Error::Precondition("empty exit curve".into()));
    }
    if t_d_ratio.is_none() && t_p_ratio.is_none() {
        return Err(Error::Precondition(
            "time estimation needs at least one of the depth or width ratios".into(),
        ));
    }
    if let Some(r) = t_d_ratio {
        check_ratio(r, "depth")?;
    }
    if let Some(r) = t_p_ratio {
        check_ratio(r, "width")?;
    }
    let t_e = curve_e.t_e();
    Ok(curve_e
        .points
        .iter()
        .map(|p| {
            let mut t = match t_d_ratio {
                Some(rd) => t_e + (p.time_cost - t_e) * rd,
                None => p.time_cost,
            };
            if let Some(rp) = t_p_ratio {
                t *= rp;
            }
            t
        })
        .collect())
}

/// Apply inference-time operator savings to a point: time shrinks by the
/// product of the quantization and dynamic-length savings; accuracy is
/// scaled by the quantization ratio only (dynamic length is exact).
pub fn est_group2(
    base: &TradeoffPoint,
    q_saving: Option<f64>,
    l_saving: Option<f64>,
    q_acc_ratio: Option<f64>,
) -> Result<TradeoffPoint> {
    for (s, name) in [(q_saving, "quantization"), (l_saving, "dynamic-length")] {
        if let Some(s) = s {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::Precondition(format!(
                    "{name} saving {s} outside [0, 1)"
                )));
            }
        }
    }
    if let Some(r) = q_acc_ratio {
        if r <= 0.0 {
            return Err(Error::Precondition(
                "quantization accuracy ratio must be positive".into(),
            ));
        }
    }
    let mut out = *base;
    out.time_cost *= (1.0 - q_saving.unwrap_or(0.0)) * (1.0 - l_saving.unwrap_or(0.0));
    if let Some(r) = q_acc_ratio {
        out.accuracy *= r;
    }
    Ok(out)
}

/// Combined relative time saving of applying both inference-time
/// operators, as a fraction of base time.
pub fn combined_saving(q_saving: f64, l_saving: f64) -> f64 {
    1.0 - (1.0 - q_saving) * (1.0 - l_saving)
}

/// Round a fraction to whole percent, half away from zero, tolerating
/// float representation noise in the inputs (0.915 -> 92).
pub fn round_percent(fraction: f64) -> i64 {
    let pct = (fraction * 100.0 * 1e6).round() / 1e6;
    pct.round() as i64
}

// ---------------------------------------------------------------------------
// Full-scale reference fixture
// ---------------------------------------------------------------------------

/// One row of the shipped full-scale GLUE reference measurements:
/// per-pipeline accuracy with/without int8 quantization, raw latency, and
/// the relative time savings of quantization (q) and dynamic length (l).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub dataset: String,
    pub pipeline: String,
    pub accuracy: f64,
    pub accuracy_q: f64,
    pub time_ms: f64,
    pub q_saving: f64,
    pub l_saving: f64,
    pub ql_saving_measured: f64,
    /// Whole-percent combined-saving estimate the fixture was published with.
    pub ql_saving_est_pct: i64,
}

/// Reference rows shipped with the crate (full-scale BERT-base runs on
/// four GLUE tasks; not reproducible at toy scale, used as an arithmetic
/// oracle for the composition rules).
pub fn reference_rows() -> Vec<ReferenceRow> {
    serde_json::from_str(include_str!("../fixtures/glue_savings.json"))
        .expect("bundled fixture parses")
}

// ---------------------------------------------------------------------------
// Pipeline estimation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedCurve {
    pub points: Vec<TradeoffPoint>,
    /// Which measured records and which rules produced the points.
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedPoint {
    pub point: TradeoffPoint,
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Estimate {
    Curve(EstimatedCurve),
    Point(EstimatedPoint),
}

struct Inputs<'a> {
    o: &'a TradeoffPoint,
    d: Option<&'a TradeoffPoint>,
    p: Option<&'a TradeoffPoint>,
    e: Option<TradeoffCurve>,
    q: Option<&'a TradeoffPoint>,
    l: Option<&'a TradeoffPoint>,
    pq: Option<&'a TradeoffPoint>,
    provenance: Vec<String>,
}

fn gather<'a>(
    store: &'a MeasurementStore,
    target: &PipelineSpec,
    task: &str,
    seed: u64,
) -> Result<Inputs<'a>> {
    let mut missing = Vec::new();
    let mut provenance = Vec::new();
    let key = |p: &str| format!("{task}/{seed}/{p}");

    let point_of = |pipeline: &str, missing: &mut Vec<String>| -> Option<&'a TradeoffPoint> {
        match store.get(task, seed, pipeline).and_then(|r| r.point.as_ref()) {
            Some(p) => Some(p),
            None => {
                missing.push(key(pipeline));
                None
            }
        }
    };

    let o = point_of("O", &mut missing);
    let has = |c: OpCode| target.ops.contains(&c);
    let d = has(OpCode::D).then(|| point_of("D", &mut missing)).flatten();
    let p = has(OpCode::P).then(|| point_of("P", &mut missing)).flatten();
    let l = has(OpCode::L).then(|| point_of("L", &mut missing)).flatten();
    let need_pq = has(OpCode::P) && has(OpCode::Q);
    let q = (has(OpCode::Q) && !need_pq)
        .then(|| point_of("Q", &mut missing))
        .flatten();
    let pq = need_pq.then(|| point_of("PQ", &mut missing)).flatten();
    let e = if has(OpCode::E) {
        match store.get(task, seed, "E").and_then(|r| r.curve.as_ref()) {
            Some(c) => Some(store_curve_to_tradeoff(c)),
            None => {
                missing.push(key("E"));
                None
            }
        }
    } else {
        None
    };
    if !missing.is_empty() {
        if need_pq && missing.iter().any(|m| m.ends_with("/PQ")) {
            missing.push(
                "pruning and quantization interact; their joint effect must be measured \
                 as the compound \"PQ\" pipeline"
                    .into(),
            );
        }
        return Err(Error::MissingMeasurements(missing));
    }
    for pl in ["O", "D", "P", "E", "L", "Q", "PQ"] {
        let used = match pl {
            "O" => true,
            "D" => d.is_some(),
            "P" => p.is_some(),
            "E" => e.is_some(),
            "L" => l.is_some(),
            "Q" => q.is_some(),
            "PQ" => pq.is_some(),
            _ => unreachable!(),
        };
        if used {
            provenance.push(format!("measured record {}", key(pl)));
        }
    }
    Ok(Inputs {
        o: o.unwrap(),
        d,
        p,
        e,
        q,
        l,
        pq,
        provenance,
    })
}

/// Estimate a composite pipeline from single-operator records in the
/// store. Returns a curve iff the target contains E; a single-operator
/// target returns its stored measurement unchanged.
pub fn estimate_pipeline(
    store: &MeasurementStore,
    target: &PipelineSpec,
    task: &str,
    seed: u64,
) -> Result<Estimate> {
    let violations = validate(target);
    if !violations.is_empty() {
        return Err(Error::InvalidPipeline(violations));
    }
    let name = target.to_string();

    // single operator (or the base itself): the stored record is the answer
    if target.ops.len() <= 1 {
        let rec = store
            .get(task, seed, &name)
            .ok_or_else(|| Error::MissingMeasurements(vec![format!("{task}/{seed}/{name}")]))?;
        let prov = vec![format!("measured record {task}/{seed}/{name}")];
        return match (&rec.point, &rec.curve) {
            (Some(p), _) => Ok(Estimate::Point(EstimatedPoint {
                point: *p,
                provenance: prov,
            })),
            (_, Some(c)) => Ok(Estimate::Curve(EstimatedCurve {
                points: store_curve_to_tradeoff(c).points,
                provenance: prov,
            })),
            _ => Err(Error::Precondition(format!(
                "record {task}/{seed}/{name} has neither point nor curve"
            ))),
        };
    }

    let mut inp = gather(store, target, task, seed)?;
    let a_o = inp.o.accuracy;
    let t_o = inp.o.time_cost;
    if t_o <= 0.0 {
        return Err(Error::Precondition("base time must be positive".into()));
    }

    // accuracy ratios from the depth/width operators
    let mut acc_ratio = 1.0;
    if let Some(d) = inp.d {
        acc_ratio *= d.accuracy / a_o;
        inp.provenance
            .push("accuracy: applied relative drop of depth reduction".into());
    }
    if let Some(p) = inp.p {
        acc_ratio *= p.accuracy / a_o;
        inp.provenance
            .push("accuracy: applied relative drop of width reduction".into());
    }

    // inference-time operator savings
    let (q_saving, q_acc_ratio) = match (inp.q, inp.pq, inp.p) {
        (Some(q), _, _) => {
            inp.provenance
                .push("time/accuracy: quantization savings from its solo record".into());
            (Some(1.0 - q.time_cost / t_o), Some(q.accuracy / a_o))
        }
        (None, Some(pq), Some(p)) => {
            // compound: Q's effect measured on top of the pruned model
            inp.provenance.push(
                "time/accuracy: quantization savings from the compound PQ record \
                 relative to P"
                    .into(),
            );
            (
                Some(1.0 - pq.time_cost / p.time_cost),
                Some(pq.accuracy / p.accuracy),
            )
        }
        _ => (None, None),
    };
    let l_saving = inp.l.map(|l| {
        inp.provenance
            .push("time: dynamic-length saving from its solo record; accuracy untouched".into());
        1.0 - l.time_cost / t_o
    });

    if let Some(curve_e) = inp.e {
        let d_ratio = inp.d.map(|d| d.time_cost / t_o);
        let p_ratio = inp.p.map(|p| p.time_cost / t_o);
        let times = if d_ratio.is_some() || p_ratio.is_some() {
            if d_ratio.is_some() {
                inp.provenance.push(
                    "time: depth ratio interpolated above the one-layer exit floor".into(),
                );
            }
            if p_ratio.is_some() {
                inp.provenance
                    .push("time: width ratio applied uniformly to the curve".into());
            }
            est_time(&curve_e, d_ratio, p_ratio)?
        } else {
            curve_e.points.iter().map(|p| p.time_cost).collect()
        };
        let mut points = Vec::with_capacity(curve_e.points.len());
        for (pt, t) in curve_e.points.iter().zip(times) {
            let scaled = TradeoffPoint {
                time_cost: t,
                accuracy: pt.accuracy * acc_ratio,
                ..*pt
            };
            points.push(est_group2(&scaled, q_saving, l_saving, q_acc_ratio)?);
        }
        points.sort_by(|a, b| a.time_cost.partial_cmp(&b.time_cost).unwrap());
        Ok(Estimate::Curve(EstimatedCurve {
            points,
            provenance: inp.provenance,
        }))
    } else {
        let mut time_ratio = 1.0;
        if let Some(d) = inp.d {
            time_ratio *= d.time_cost / t_o;
        }
        if let Some(p) = inp.p {
            time_ratio *= p.time_cost / t_o;
        }
        let scaled = TradeoffPoint {
            time_cost: t_o * time_ratio,
            accuracy: a_o * acc_ratio,
            threshold: None,
            avg_exit_layer: 0.0,
            wallclock_ms: 0.0,
        };
        Ok(Estimate::Point(EstimatedPoint {
            point: est_group2(&scaled, q_saving, l_saving, q_acc_ratio)?,
            provenance: inp.provenance,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::parse;

    fn pt(t: f64, a: f64, th: Option<f64>) -> TradeoffPoint {
        TradeoffPoint {
            time_cost: t,
            accuracy: a,
            threshold: th,
            avg_exit_layer: 0.0,
            wallclock_ms: 0.0,
        }
    }

    #[test]
    fn accuracy_ratio_rule() {
        // no-drop operator leaves accuracy unchanged
        assert_eq!(est_accuracy(0.9, 0.8, 0.8).unwrap(), 0.9);
        // base pipeline = base model returns the operator accuracy
        let a = est_accuracy(92.7, 89.2, 92.7).unwrap();
        assert!((a - 89.2).abs() < 1e-12);
        assert!(est_accuracy(0.9, 0.8, 0.0).is_err());
    }

    #[test]
    fn accuracy_composition_commutes() {
        let a_o = 0.92;
        let via_dp = est_accuracy(est_accuracy(0.90, 0.89, a_o).unwrap(), 0.91, a_o).unwrap();
        let via_pd = est_accuracy(est_accuracy(0.90, 0.91, a_o).unwrap(), 0.89, a_o).unwrap();
        assert!((via_dp - via_pd).abs() < 1e-15);
    }

    #[test]
    fn time_depth_interpolation() {
        let curve = TradeoffCurve {
            points: vec![pt(10.0, 0.7, Some(0.0)), pt(60.0, 0.9, Some(1.01))],
        };
        let t = est_time(&curve, Some(0.5), None).unwrap();
        assert_eq!(t[0], 10.0); // exit floor: no extra saving
        assert!((t[1] - 35.0).abs() < 1e-12);
        let t2 = est_time(&curve, Some(0.5), Some(0.6)).unwrap();
        assert!((t2[1] - 21.0).abs() < 1e-12);
    }

    #[test]
    fn time_boundaries_exact() {
        let curve = TradeoffCurve {
            points: vec![pt(10.0, 0.7, None), pt(60.0, 0.9, None)],
        };
        // full-ratio depth reduction changes nothing
        let t = est_time(&curve, Some(1.0), None).unwrap();
        assert_eq!(t, vec![10.0, 60.0]);
        // width-only is a pure scaling
        let t = est_time(&curve, None, Some(0.5)).unwrap();
        assert_eq!(t, vec![5.0, 30.0]);
        assert!(est_time(&curve, None, None).is_err());
        assert!(est_time(&curve, Some(1.5), None).is_err());
    }

    #[test]
    fn group2_identity_and_savings() {
        let base = pt(100.0, 0.9, None);
        let same = est_group2(&base, Some(0.0), Some(0.0), Some(1.0)).unwrap();
        assert_eq!(same, base);
        let only_l = est_group2(&base, None, Some(0.85), None).unwrap();
        assert!((only_l.time_cost - 15.0).abs() < 1e-12);
        assert_eq!(only_l.accuracy, 0.9);
        assert!(est_group2(&base, Some(1.0), None, None).is_err());
    }

    #[test]
    fn rounding_matches_published_examples() {
        assert_eq!(round_percent(combined_saving(0.50, 0.83)), 92);
        assert_eq!(round_percent(combined_saving(0.66, 0.89)), 96);
        assert_eq!(round_percent(combined_saving(0.65, 0.85)), 95); // 94.75 up
    }

    #[test]
    fn reference_rows_reproduce_combined_estimates() {
        let rows = reference_rows();
        assert_eq!(rows.len(), 16);
        for r in rows {
            let base = pt(r.time_ms, r.accuracy / 100.0, None);
            let est = est_group2(&base, Some(r.q_saving), Some(r.l_saving), None).unwrap();
            let saving = 1.0 - est.time_cost / r.time_ms;
            assert_eq!(
                round_percent(saving),
                r.ql_saving_est_pct,
                "{}/{}",
                r.dataset,
                r.pipeline
            );
        }
    }

    fn demo_store() -> MeasurementStore {
        let mut s = MeasurementStore::default();
        s.record_point("parity", 1, "O", pt(100.0, 0.90, None));
        s.record_point("parity", 1, "D", pt(50.0, 0.85, None));
        s.record_point("parity", 1, "P", pt(70.0, 0.88, None));
        s.record_point("parity", 1, "L", pt(60.0, 0.90, None));
        s.record_point("parity", 1, "Q", pt(55.0, 0.89, None));
        s.record_curve(
            "parity",
            1,
            "E",
            &TradeoffCurve {
                points: vec![pt(25.0, 0.75, Some(0.0)), pt(100.0, 0.90, Some(1.01))],
            },
        );
        s
    }

    #[test]
    fn single_operator_passthrough() {
        let s = demo_store();
        match estimate_pipeline(&s, &parse("D").unwrap(), "parity", 1).unwrap() {
            Estimate::Point(p) => assert_eq!(p.point, pt(50.0, 0.85, None)),
            _ => panic!("expected point"),
        }
    }

    #[test]
    fn composite_point_pipeline() {
        let s = demo_store();
        match estimate_pipeline(&s, &parse("DP").unwrap(), "parity", 1).unwrap() {
            Estimate::Point(p) => {
                assert!((p.point.time_cost - 100.0 * 0.5 * 0.7).abs() < 1e-12);
                let want = 0.90 * (0.85 / 0.90) * (0.88 / 0.90);
                assert!((p.point.accuracy - want).abs() < 1e-12);
            }
            _ => panic!("expected point"),
        }
    }

    #[test]
    fn curve_pipeline_composes_all_rules() {
        let s = demo_store();
        match estimate_pipeline(&s, &parse("EDL").unwrap(), "parity", 1).unwrap() {
            Estimate::Curve(c) => {
                // floor point: depth adds nothing, length multiplies
                assert!((c.points[0].time_cost - 25.0 * 0.6).abs() < 1e-12);
                // top point: 25 + 75*0.5 = 62.5, then *0.6
                assert!((c.points[1].time_cost - 62.5 * 0.6).abs() < 1e-12);
                let want_top = 0.90 * (0.85 / 0.90);
                assert!((c.points[1].accuracy - want_top).abs() < 1e-12);
                assert!(!c.provenance.is_empty());
            }
            _ => panic!("expected curve"),
        }
    }

    #[test]
    fn pq_without_compound_refused() {
        let s = demo_store();
        let err = estimate_pipeline(&s, &parse("PQ").unwrap(), "parity", 1).unwrap_err();
        match err {
            Error::MissingMeasurements(items) => {
                assert!(items.iter().any(|m| m.contains("/PQ")), "{items:?}");
                assert!(items.iter().any(|m| m.contains("compound")), "{items:?}");
            }
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn pq_compound_used_when_present() {
        let mut s = demo_store();
        s.record_point("parity", 1, "PQ", pt(30.0, 0.86, None));
        match estimate_pipeline(&s, &parse("PQ").unwrap(), "parity", 1).unwrap() {
            Estimate::Point(p) => {
                // time: O * (P/O) * (PQ/P) = PQ's own time
                assert!((p.point.time_cost - 30.0).abs() < 1e-12);
                // accuracy: O * (P/O) * (PQ/P) = PQ's own accuracy
                assert!((p.point.accuracy - 0.86).abs() < 1e-12);
            }
            _ => panic!("expected point"),
        }
    }

    #[test]
    fn missing_records_itemized() {
        let mut s = MeasurementStore::default();
        s.record_point("parity", 1, "O", pt(100.0, 0.90, None));
        let err = estimate_pipeline(&s, &parse("DE").unwrap(), "parity", 1).unwrap_err();
        match err {
            Error::MissingMeasurements(items) => {
                assert_eq!(items, vec!["parity/1/D".to_string(), "parity/1/E".to_string()]);
            }
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn invalid_target_rejected() {
        let s = demo_store();
        let spec = PipelineSpec {
            ops: vec![OpCode::P, OpCode::D],
        };
        assert!(matches!(
            estimate_pipeline(&s, &spec, "parity", 1),
            Err(Error::InvalidPipeline(_))
        ));
    }

    #[test]
    fn store_roundtrip() {
        let s = demo_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.json");
        s.save(&path).unwrap();
        assert_eq!(MeasurementStore::load(&path).unwrap(), s);
    }
}
