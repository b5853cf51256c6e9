//! Pipeline strings: parsing, ordering validation, execution with prefix
//! caching, and checkpoint persistence.
//!
//! A pipeline is written as a string over {D, P, E, L, Q}; "O" is the
//! empty pipeline (the original fine-tuned model). Checkpoints are a
//! `manifest.json` plus a raw little-endian `weights.bin`.

use crate::error::{Error, Result};
use crate::model::{Classifier, LayerWeights, ModelConfig, QuantLayerWeights, TransformerModel};
use crate::operators::{
    apply_distill, apply_early_exit, apply_prune, apply_quantize, compute_importance,
    DistillConfig, PruneConfig, TrainConfig,
};
use crate::task::Dataset;
use crate::tensor::{QuantizedTensor, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpCode {
    D,
    P,
    E,
    L,
    Q,
}

impl OpCode {
    pub fn letter(&self) -> char {
        match self {
            OpCode::D => 'D',
            OpCode::P => 'P',
            OpCode::E => 'E',
            OpCode::L => 'L',
            OpCode::Q => 'Q',
        }
    }

    /// Group I operators need further training; Group II are
    /// inference-time only.
    pub fn is_group1(&self) -> bool {
        matches!(self, OpCode::D | OpCode::P | OpCode::E)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineSpec {
    pub ops: Vec<OpCode>,
}

impl fmt::Display for PipelineSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ops.is_empty() {
            write!(f, "O")
        } else {
            for op in &self.ops {
                write!(f, "{}", op.letter())?;
            }
            Ok(())
        }
    }
}

/// Parse a pipeline string. Parsing does not check ordering rules.
pub fn parse(s: &str) -> Result<PipelineSpec> {
    if s.is_empty() {
        return Err(Error::Parse("empty pipeline string".into()));
    }
    if s == "O" {
        return Ok(PipelineSpec { ops: Vec::new() });
    }
    let mut ops = Vec::new();
    for ch in s.chars() {
        let op = match ch {
            'D' => OpCode::D,
            'P' => OpCode::P,
            'E' => OpCode::E,
            'L' => OpCode::L,
            'Q' => OpCode::Q,
            'O' => {
                return Err(Error::Parse(
                    "'O' cannot be combined with other letters".into(),
                ))
            }
            other => return Err(Error::Parse(format!("unknown operator letter '{other}'"))),
        };
        if ops.contains(&op) {
            return Err(Error::Parse(format!("repeated operator letter '{ch}'")));
        }
        ops.push(op);
    }
    Ok(PipelineSpec { ops })
}

/// Ordering rules: Group I (D, P, E) must precede Group II (Q, L), and D
/// must not appear after P. Returns one violation string per breach.
pub fn validate(spec: &PipelineSpec) -> Vec<String> {
    let mut violations = Vec::new();
    let mut seen_group2 = false;
    let mut seen_p = false;
    for op in &spec.ops {
        if op.is_group1() {
            if seen_group2 {
                violations.push(format!(
                    "Group I operator {} after a Group II operator",
                    op.letter()
                ));
            }
            if *op == OpCode::D && seen_p {
                violations.push("D after P".into());
            }
            if *op == OpCode::P {
                seen_p = true;
            }
        } else {
            seen_group2 = true;
        }
    }
    violations
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub task: String,
    pub seed: u64,
    pub pipeline: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub model: TransformerModel,
    pub provenance: Provenance,
    pub l_flag: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OpConfigs {
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub prune: PruneConfig,
}

impl OpConfigs {
    pub fn toy() -> Self {
        OpConfigs {
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            prune: PruneConfig::toy(),
        }
    }
}

/// Stable FNV-1a so per-step training seeds depend only on (run seed,
/// pipeline prefix).
fn derive_seed(seed: u64, prefix: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ seed.wrapping_mul(0x100000001b3);
    for b in prefix.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn apply_op(
    op: OpCode,
    artifact: &ModelArtifact,
    prefix: &str,
    data: &Dataset,
    cfgs: &OpConfigs,
) -> Result<ModelArtifact> {
    let tcfg = cfgs.train.with_seed(derive_seed(artifact.provenance.seed, prefix));
    let mut next = artifact.clone();
    match op {
        OpCode::D => {
            let (m, _) = apply_distill(&artifact.model, &data.train, &cfgs.distill, &tcfg)?;
            next.model = m;
        }
        OpCode::P => {
            let scores = compute_importance(&artifact.model, &data.dev)?;
            let (m, _) = apply_prune(
                &artifact.model,
                &scores,
                &cfgs.prune,
                &data.train,
                &cfgs.distill,
                &tcfg,
            )?;
            next.model = m;
        }
        OpCode::E => {
            let (m, _) = apply_early_exit(&artifact.model, &data.train, &tcfg)?;
            next.model = m;
        }
        OpCode::Q => {
            next.model = apply_quantize(&artifact.model)?;
        }
        OpCode::L => {
            next.l_flag = true;
        }
    }
    next.provenance.pipeline = prefix.to_string();
    Ok(next)
}

/// Apply a validated pipeline left to right, caching and reusing every
/// proper prefix in the registry.
pub fn execute(
    spec: &PipelineSpec,
    base: &ModelArtifact,
    data: &Dataset,
    cfgs: &OpConfigs,
    mut registry: Option<&mut Registry>,
) -> Result<ModelArtifact> {
    let violations = validate(spec);
    if !violations.is_empty() {
        return Err(Error::InvalidPipeline(violations));
    }
    if spec.ops.is_empty() {
        return Ok(base.clone());
    }

    let letters: Vec<char> = spec.ops.iter().map(|o| o.letter()).collect();
    // longest cached prefix, if any
    let mut start = 0;
    let mut current = base.clone();
    if let Some(reg) = registry.as_deref_mut() {
        for k in (1..=letters.len()).rev() {
            let prefix: String = letters[..k].iter().collect();
            if let Some(art) = reg.load(&base.provenance.task, base.provenance.seed, &prefix)? {
                current = art;
                start = k;
                break;
            }
        }
    }
    for (i, &op) in spec.ops.iter().enumerate().skip(start) {
        let prefix: String = letters[..=i].iter().collect();
        current = apply_op(op, &current, &prefix, data, cfgs)
            .map_err(|e| Error::Precondition(format!("operator {} at position {}: {e}", op.letter(), i + 1)))?;
        if let Some(reg) = registry.as_deref_mut() {
            reg.store(&current)?;
        }
    }
    Ok(current)
}

// ---------------------------------------------------------------------------
// Checkpoint persistence
// ---------------------------------------------------------------------------

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String, // "f64" | "i8"
    offset: u64,
    byte_len: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerMeta {
    heads_kept: usize,
    ff_kept: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    layers: Vec<LayerMeta>,
    has_exits: bool,
    quantized: bool,
    l_flag: bool,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

enum TRef<'a> {
    F(&'a Tensor),
    Q(&'a QuantizedTensor),
}

fn named_tensors(model: &TransformerModel) -> Vec<(String, TRef<'_>)> {
    let mut out: Vec<(String, TRef)> = vec![
        ("emb".into(), TRef::F(&model.emb)),
        ("pos".into(), TRef::F(&model.pos)),
    ];
    for (i, lw) in model.layers.iter().enumerate() {
        for (n, t) in [
            ("wq", &lw.wq),
            ("bq", &lw.bq),
            ("wk", &lw.wk),
            ("bk", &lw.bk),
            ("wv", &lw.wv),
            ("bv", &lw.bv),
            ("wo", &lw.wo),
            ("bo", &lw.bo),
            ("w1", &lw.w1),
            ("b1", &lw.b1),
            ("w2", &lw.w2),
            ("b2", &lw.b2),
            ("ln1_g", &lw.ln1_g),
            ("ln1_b", &lw.ln1_b),
            ("ln2_g", &lw.ln2_g),
            ("ln2_b", &lw.ln2_b),
        ] {
            out.push((format!("layer{i}.{n}"), TRef::F(t)));
        }
        if let Some(q) = &lw.quant {
            for (n, t) in [
                ("wq", &q.wq),
                ("wk", &q.wk),
                ("wv", &q.wv),
                ("wo", &q.wo),
                ("w1", &q.w1),
                ("w2", &q.w2),
            ] {
                out.push((format!("layer{i}.quant.{n}"), TRef::Q(t)));
            }
        }
    }
    out.push(("cls.w".into(), TRef::F(&model.classifier.w)));
    out.push(("cls.b".into(), TRef::F(&model.classifier.b)));
    if let Some(exits) = &model.exits {
        for (i, c) in exits.iter().enumerate() {
            out.push((format!("exit{i}.w"), TRef::F(&c.w)));
            out.push((format!("exit{i}.b"), TRef::F(&c.b)));
        }
    }
    out
}

/// Write `manifest.json` + `weights.bin` into `dir`.
pub fn save(artifact: &ModelArtifact, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let model = &artifact.model;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for (name, tref) in named_tensors(model) {
        let offset = blob.len() as u64;
        let (shape, dtype, scale) = match tref {
            TRef::F(t) => {
                for v in &t.data {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                (t.shape.clone(), "f64", None)
            }
            TRef::Q(t) => {
                blob.extend(t.qdata.iter().map(|&q| q as u8));
                (t.shape.clone(), "i8", Some(t.scale))
            }
        };
        entries.push(TensorEntry {
            name,
            shape,
            dtype: dtype.into(),
            offset,
            byte_len: blob.len() as u64 - offset,
            scale,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: model.cfg.clone(),
        layers: model
            .layers
            .iter()
            .map(|l| LayerMeta {
                heads_kept: l.heads_kept,
                ff_kept: l.ff_kept,
            })
            .collect(),
        has_exits: model.has_exits(),
        quantized: model.quantized,
        l_flag: artifact.l_flag,
        provenance: artifact.provenance.clone(),
        tensors: entries,
    };
    let mut mf = fs::File::create(dir.join("manifest.json"))?;
    mf.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    fs::File::create(dir.join("weights.bin"))?.write_all(&blob)?;
    Ok(())
}

fn read_f64(blob: &[u8], e: &TensorEntry, expect_shape: &[usize]) -> Result<Tensor> {
    if e.dtype != "f64" || e.shape != expect_shape {
        return Err(Error::Checkpoint(format!(
            "tensor {}: dtype/shape mismatch",
            e.name
        )));
    }
    let n: usize = e.shape.iter().product();
    let start = e.offset as usize;
    let end = start + n * 8;
    if e.byte_len as usize != n * 8 || end > blob.len() {
        return Err(Error::Checkpoint(format!("tensor {}: out of bounds", e.name)));
    }
    let data = blob[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(&e.shape, data))
}

fn read_i8(blob: &[u8], e: &TensorEntry, expect_shape: &[usize]) -> Result<QuantizedTensor> {
    if e.dtype != "i8" || e.shape != expect_shape {
        return Err(Error::Checkpoint(format!(
            "tensor {}: dtype/shape mismatch",
            e.name
        )));
    }
    let n: usize = e.shape.iter().product();
    let start = e.offset as usize;
    let end = start + n;
    if e.byte_len as usize != n || end > blob.len() {
        return Err(Error::Checkpoint(format!("tensor {}: out of bounds", e.name)));
    }
    Ok(QuantizedTensor {
        shape: e.shape.clone(),
        qdata: blob[start..end].iter().map(|&b| b as i8).collect(),
        scale: e
            .scale
            .ok_or_else(|| Error::Checkpoint(format!("tensor {}: missing scale", e.name)))?,
    })
}

/// Load a checkpoint; bit-identical inverse of [`save`].
pub fn load(dir: &Path) -> Result<ModelArtifact> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let mut blob = Vec::new();
    fs::File::open(dir.join("weights.bin"))?.read_to_end(&mut blob)?;

    let cfg = manifest.config.clone();
    let d = cfg.d_model;
    let dh = cfg.d_head;
    let by_name: std::collections::HashMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    let get = |name: &str| -> Result<&TensorEntry> {
        by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, lm) in manifest.layers.iter().enumerate() {
        let hd = lm.heads_kept * dh;
        let ff = lm.ff_kept;
        let g = |n: &str| format!("layer{i}.{n}");
        let quant = if manifest.quantized {
            Some(QuantLayerWeights {
                wq: read_i8(&blob, get(&g("quant.wq"))?, &[d, hd])?,
                wk: read_i8(&blob, get(&g("quant.wk"))?, &[d, hd])?,
                wv: read_i8(&blob, get(&g("quant.wv"))?, &[d, hd])?,
                wo: read_i8(&blob, get(&g("quant.wo"))?, &[hd, d])?,
                w1: read_i8(&blob, get(&g("quant.w1"))?, &[d, ff])?,
                w2: read_i8(&blob, get(&g("quant.w2"))?, &[ff, d])?,
            })
        } else {
            None
        };
        layers.push(LayerWeights {
            wq: read_f64(&blob, get(&g("wq"))?, &[d, hd])?,
            bq: read_f64(&blob, get(&g("bq"))?, &[hd])?,
            wk: read_f64(&blob, get(&g("wk"))?, &[d, hd])?,
            bk: read_f64(&blob, get(&g("bk"))?, &[hd])?,
            wv: read_f64(&blob, get(&g("wv"))?, &[d, hd])?,
            bv: read_f64(&blob, get(&g("bv"))?, &[hd])?,
            wo: read_f64(&blob, get(&g("wo"))?, &[hd, d])?,
            bo: read_f64(&blob, get(&g("bo"))?, &[d])?,
            w1: read_f64(&blob, get(&g("w1"))?, &[d, ff])?,
            b1: read_f64(&blob, get(&g("b1"))?, &[ff])?,
            w2: read_f64(&blob, get(&g("w2"))?, &[ff, d])?,
            b2: read_f64(&blob, get(&g("b2"))?, &[d])?,
            ln1_g: read_f64(&blob, get(&g("ln1_g"))?, &[d])?,
            ln1_b: read_f64(&blob, get(&g("ln1_b"))?, &[d])?,
            ln2_g: read_f64(&blob, get(&g("ln2_g"))?, &[d])?,
            ln2_b: read_f64(&blob, get(&g("ln2_b"))?, &[d])?,
            heads_kept: lm.heads_kept,
            ff_kept: lm.ff_kept,
            quant,
        });
    }
    let exits = if manifest.has_exits {
        let mut ex = Vec::new();
        for i in 0..manifest.layers.len() - 1 {
            ex.push(Classifier {
                w: read_f64(&blob, get(&format!("exit{i}.w"))?, &[d, cfg.n_classes])?,
                b: read_f64(&blob, get(&format!("exit{i}.b"))?, &[cfg.n_classes])?,
            });
        }
        Some(ex)
    } else {
        None
    };
    let model = TransformerModel {
        emb: read_f64(&blob, get("emb")?, &[cfg.vocab_size, d])?,
        pos: read_f64(&blob, get("pos")?, &[cfg.max_len, d])?,
        layers,
        classifier: Classifier {
            w: read_f64(&blob, get("cls.w")?, &[d, cfg.n_classes])?,
            b: read_f64(&blob, get("cls.b")?, &[cfg.n_classes])?,
        },
        exits,
        quantized: manifest.quantized,
        cfg,
    };
    Ok(ModelArtifact {
        model,
        provenance: manifest.provenance,
        l_flag: manifest.l_flag,
    })
}

/// Directory tree `<root>/<task>/<seed>/<pipeline>/`, one checkpoint each.
#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

impl Registry {
    pub fn new(root: impl Into<PathBuf>) -> Registry {
        Registry { root: root.into() }
    }

    pub fn path(&self, task: &str, seed: u64, pipeline: &str) -> PathBuf {
        self.root.join(task).join(seed.to_string()).join(pipeline)
    }

    pub fn load(&self, task: &str, seed: u64, pipeline: &str) -> Result<Option<ModelArtifact>> {
        let dir = self.path(task, seed, pipeline);
        if dir.join("manifest.json").exists() {
            Ok(Some(load(&dir)?))
        } else {
            Ok(None)
        }
    }

    pub fn store(&self, artifact: &ModelArtifact) -> Result<PathBuf> {
        let dir = self.path(
            &artifact.provenance.task,
            artifact.provenance.seed,
            &artifact.provenance.pipeline,
        );
        save(artifact, &dir)?;
        Ok(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn parse_worked_example() {
        let spec = parse("DEPLQ").unwrap();
        assert_eq!(
            spec.ops,
            vec![OpCode::D, OpCode::E, OpCode::P, OpCode::L, OpCode::Q]
        );
        assert_eq!(spec.to_string(), "DEPLQ");
    }

    #[test]
    fn parse_empty_pipeline() {
        let spec = parse("O").unwrap();
        assert!(spec.ops.is_empty());
        assert_eq!(spec.to_string(), "O");
    }

    #[test]
    fn parse_errors() {
        assert!(parse("DD").is_err());
        assert!(parse("DX").is_err());
        assert!(parse("OD").is_err());
        assert!(parse("").is_err());
    }

    #[test]
    fn validate_rules() {
        assert!(validate(&parse("DEPLQ").unwrap()).is_empty());
        let v = validate(&parse("PD").unwrap());
        assert!(v.iter().any(|s| s.contains("D after P")), "{v:?}");
        let v = validate(&parse("QD").unwrap());
        assert!(v.iter().any(|s| s.contains("Group I")), "{v:?}");
    }

    /// Brute-force classifier: a string is legal iff no Group I letter
    /// follows a Group II letter and D never follows P.
    fn legal_by_enumeration(s: &str) -> bool {
        let g1 = ['D', 'P', 'E'];
        let chars: Vec<char> = s.chars().collect();
        for i in 0..chars.len() {
            for j in i + 1..chars.len() {
                if !g1.contains(&chars[i]) && g1.contains(&chars[j]) {
                    return false;
                }
                if chars[i] == 'P' && chars[j] == 'D' {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn validate_matches_oracle_on_all_permutations() {
        let letters = ['D', 'P', 'E', 'L', 'Q'];
        fn perms(items: &[char]) -> Vec<Vec<char>> {
            if items.is_empty() {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for (i, &c) in items.iter().enumerate() {
                let mut rest: Vec<char> = items.to_vec();
                rest.remove(i);
                for mut p in perms(&rest) {
                    p.insert(0, c);
                    out.push(p);
                }
            }
            out
        }
        for mask in 1u32..(1 << 5) {
            let subset: Vec<char> = letters
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &c)| c)
                .collect();
            for p in perms(&subset) {
                let s: String = p.iter().collect();
                let spec = parse(&s).unwrap();
                assert_eq!(
                    validate(&spec).is_empty(),
                    legal_by_enumeration(&s),
                    "disagreement on {s}"
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_float() {
        let model = init_model(&crate::model::ModelConfig::toy(), 17).unwrap();
        let art = ModelArtifact {
            model,
            provenance: Provenance {
                task: "parity".into(),
                seed: 17,
                pipeline: "O".into(),
            },
            l_flag: false,
        };
        let dir = tempfile::tempdir().unwrap();
        save(&art, dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(art, loaded);
    }

    #[test]
    fn checkpoint_roundtrip_quantized() {
        let model = init_model(&crate::model::ModelConfig::toy(), 18).unwrap();
        let model = crate::operators::apply_quantize(&model).unwrap();
        let art = ModelArtifact {
            model,
            provenance: Provenance {
                task: "parity".into(),
                seed: 18,
                pipeline: "Q".into(),
            },
            l_flag: true,
        };
        let dir = tempfile::tempdir().unwrap();
        save(&art, dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(art, loaded);
    }

    #[test]
    fn truncated_weights_rejected() {
        let model = init_model(&crate::model::ModelConfig::toy(), 19).unwrap();
        let art = ModelArtifact {
            model,
            provenance: Provenance {
                task: "parity".into(),
                seed: 19,
                pipeline: "O".into(),
            },
            l_flag: false,
        };
        let dir = tempfile::tempdir().unwrap();
        save(&art, dir.path()).unwrap();
        let bin = dir.path().join("weights.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
