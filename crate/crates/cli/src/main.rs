//! Command-line front end: data generation, pipeline execution,
//! measurement, estimation, curve comparison, and commutativity reports.

use clap::{Parser, Subcommand};
use pipelab::error::Error;
use pipelab::estimator::{estimate_pipeline, Estimate, MeasurementStore};
use pipelab::evalbench::{
    commutativity_report, commute_report_to_csv, curve_distance, curve_from_csv, curve_to_csv,
    default_thresholds, measure_curve, measure_point, prepare_base, TradeoffCurve,
};
use pipelab::model::{CostModel, ModelConfig};
use pipelab::operators::{DistillConfig, PruneConfig, TrainConfig};
use pipelab::pipeline::{parse, OpConfigs, Registry};
use pipelab::task::{gen_task, SyntheticTask, TaskKind};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

const REGISTRY_ENV: &str = "PIPELAB_REGISTRY";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    task: SyntheticTask,
    model: ModelConfig,
    train: TrainConfig,
    distill: DistillConfig,
    prune: PruneConfig,
    cost: CostModel,
    thresholds: Vec<f64>,
    seeds: Vec<u64>,
    batch_size: usize,
    out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: SyntheticTask::toy(TaskKind::ParityOfMarkedTokens, 0),
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            prune: PruneConfig::toy(),
            cost: CostModel::default(),
            thresholds: default_thresholds(),
            seeds: vec![1],
            batch_size: 8,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<(), Error> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be non-empty".into()));
        }
        if self.thresholds.is_empty() {
            return Err(Error::InvalidConfig("thresholds must be non-empty".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }

    fn op_configs(&self) -> OpConfigs {
        OpConfigs {
            train: self.train.clone(),
            distill: self.distill.clone(),
            prune: self.prune.clone(),
        }
    }
}

fn task_kind(name: &str) -> Result<TaskKind, Error> {
    match name {
        "parity" => Ok(TaskKind::ParityOfMarkedTokens),
        "majority" => Ok(TaskKind::MajorityClass),
        "pattern" => Ok(TaskKind::PatternContainment),
        other => Err(Error::InvalidConfig(format!(
            "unknown task {other:?}; expected parity, majority, or pattern"
        ))),
    }
}

#[derive(Parser)]
#[command(name = "pipelab", about = "Transformer efficiency-pipeline laboratory")]
struct Cli {
    /// JSON config file; flags override individual fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Task kind: parity, majority, or pattern.
    #[arg(long, global = true)]
    task: Option<String>,
    /// Run seed (replaces the config's seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train/dev/test splits of a synthetic task.
    GenData {
        /// Overwrite existing data files.
        #[arg(long)]
        force: bool,
    },
    /// Execute a pipeline, measure it, and record the measurement.
    Run {
        /// Pipeline string, e.g. "DEPLQ" or "O".
        #[arg(long)]
        pipeline: String,
        /// Measurement store to append to (default <out>/measurements.json).
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Estimate a composite pipeline from single-operator measurements.
    Estimate {
        #[arg(long)]
        pipeline: String,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Distance between two measured curve CSV files.
    Compare { curve_a: PathBuf, curve_b: PathBuf },
    /// Same-order vs different-order curve distances for an operator set.
    Commute {
        /// Operator set as letters, e.g. "DE" or "PE"; must contain E.
        #[arg(long)]
        ops: String,
        /// Seeds to run each ordering with (default: config seeds).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg: RunConfig = match &cli.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(task) = &cli.task {
        cfg.task.kind = task_kind(task)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(cfg: &RunConfig) -> Result<(), Error> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(
        cfg.out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;
    Ok(())
}

fn registry(cfg: &RunConfig) -> Registry {
    let root = std::env::var_os(REGISTRY_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.out_dir.join("registry"));
    Registry::new(root)
}

fn store_path(cfg: &RunConfig, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .unwrap_or_else(|| cfg.out_dir.join("measurements.json"))
}

fn load_store(path: &Path) -> Result<MeasurementStore, Error> {
    if path.exists() {
        MeasurementStore::load(path)
    } else {
        Ok(MeasurementStore::default())
    }
}

fn cmd_gen_data(cfg: &RunConfig, force: bool) -> Result<(), Error> {
    let mut task = cfg.task.clone();
    if let Some(&seed) = cfg.seeds.first() {
        // data seed follows the run seed so `--seed` selects the dataset
        task.seed = seed;
    }
    let data = gen_task(&task)?;
    let dir = cfg.out_dir.join("data");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}-{}.json", task.name(), task.seed));
    if path.exists() && !force {
        return Err(Error::Precondition(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    std::fs::write(&path, serde_json::to_string(&data)?)?;
    echo_config(cfg)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_run(cfg: &RunConfig, pipeline: &str, store_flag: &Option<PathBuf>) -> Result<(), Error> {
    let spec = parse(pipeline)?;
    let violations = pipelab::pipeline::validate(&spec);
    if !violations.is_empty() {
        return Err(Error::InvalidPipeline(violations));
    }
    let cfgs = cfg.op_configs();
    let data = gen_task(&cfg.task)?;
    let mut reg = registry(cfg);
    let spath = store_path(cfg, store_flag);
    let mut store = load_store(&spath)?;
    echo_config(cfg)?;
    for &seed in &cfg.seeds {
        let base = prepare_base(&cfg.task, &cfg.model, &cfgs, seed, Some(&mut reg))?;
        let art = pipelab::pipeline::execute(&spec, &base, &data, &cfgs, Some(&mut reg))?;
        let name = spec.to_string();
        let run_dir = cfg.out_dir.join(cfg.task.name()).join(seed.to_string());
        std::fs::create_dir_all(&run_dir)?;
        if art.model.has_exits() {
            let curve = measure_curve(
                &art,
                &data.test,
                &cfg.thresholds,
                cfg.batch_size,
                &cfg.cost,
            )?;
            let csv_path = run_dir.join(format!("{name}.curve.csv"));
            std::fs::write(&csv_path, curve_to_csv(&curve))?;
            store.record_curve(cfg.task.name(), seed, &name, &curve);
            println!(
                "{name} seed {seed}: curve with {} points -> {}",
                curve.points.len(),
                csv_path.display()
            );
        } else {
            let point = measure_point(&art, &data.test, cfg.batch_size, None, &cfg.cost)?;
            store.record_point(cfg.task.name(), seed, &name, point);
            println!(
                "{name} seed {seed}: accuracy {:.4}, mean MACs {:.0}",
                point.accuracy, point.time_cost
            );
        }
    }
    store.save(&spath)?;
    Ok(())
}

fn estimate_report_csv(
    est: &Estimate,
    measured: Option<&TradeoffCurve>,
    measured_point: Option<(f64, f64)>,
) -> String {
    let mut out = String::from(
        "threshold,est_time,est_accuracy,measured_time,measured_accuracy,provenance\n",
    );
    let fmt_th = |t: Option<f64>| t.map_or(String::new(), |t| t.to_string());
    match est {
        Estimate::Curve(c) => {
            let prov = c.provenance.join("; ");
            for (i, p) in c.points.iter().enumerate() {
                let (mt, ma) = measured
                    .and_then(|m| {
                        m.points
                            .iter()
                            .find(|q| q.threshold == p.threshold)
                            .map(|q| (q.time_cost.to_string(), q.accuracy.to_string()))
                    })
                    .unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    fmt_th(p.threshold),
                    p.time_cost,
                    p.accuracy,
                    mt,
                    ma,
                    if i == 0 { prov.as_str() } else { "" }
                ));
            }
        }
        Estimate::Point(p) => {
            let (mt, ma) = measured_point
                .map(|(t, a)| (t.to_string(), a.to_string()))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                fmt_th(p.point.threshold),
                p.point.time_cost,
                p.point.accuracy,
                mt,
                ma,
                p.provenance.join("; ")
            ));
        }
    }
    out
}

fn cmd_estimate(cfg: &RunConfig, pipeline: &str, store_flag: &Option<PathBuf>) -> Result<(), Error> {
    let spec = parse(pipeline)?;
    let spath = store_path(cfg, store_flag);
    let store = MeasurementStore::load(&spath)?;
    let task = cfg.task.name();
    let seed = cfg.seeds[0];
    let est = estimate_pipeline(&store, &spec, task, seed)?;
    let name = spec.to_string();
    let measured = store.get(task, seed, &name);
    let measured_curve = measured
        .and_then(|r| r.curve.as_ref())
        .map(|c| pipelab::estimator::store_curve_to_tradeoff(c));
    let measured_point = measured
        .and_then(|r| r.point.as_ref())
        .map(|p| (p.time_cost, p.accuracy));
    let csv = estimate_report_csv(&est, measured_curve.as_ref(), measured_point);
    let dir = cfg.out_dir.join(task).join(seed.to_string());
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{name}.estimate.csv"));
    std::fs::write(&path, &csv)?;
    if let (Estimate::Curve(c), Some(m)) = (&est, &measured_curve) {
        let d = curve_distance(&TradeoffCurve { points: c.points.clone() }, m)?;
        println!("estimated vs measured {name}: curve distance {d:.2} accuracy points");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_compare(a: &Path, b: &Path) -> Result<(), Error> {
    let ca = curve_from_csv(&std::fs::read_to_string(a)?)?;
    let cb = curve_from_csv(&std::fs::read_to_string(b)?)?;
    let d = curve_distance(&ca, &cb)?;
    println!("{d:.4}");
    Ok(())
}

fn cmd_commute(cfg: &RunConfig, ops: &str, seeds: &[u64]) -> Result<(), Error> {
    let spec = parse(ops)?;
    let seeds = if seeds.is_empty() { &cfg.seeds } else { seeds };
    let cfgs = cfg.op_configs();
    let mut reg = registry(cfg);
    echo_config(cfg)?;
    let report = commutativity_report(
        &spec.ops,
        seeds,
        &cfg.task,
        &cfg.model,
        &cfgs,
        &cfg.cost,
        &cfg.thresholds,
        cfg.batch_size,
        Some(&mut reg),
    )?;
    let csv = commute_report_to_csv(&report);
    let path = cfg
        .out_dir
        .join(format!("commute-{}-{}.csv", report.task, report.operator_set));
    std::fs::write(&path, &csv)?;
    print!("{csv}");
    if !report.overlap_1sd {
        eprintln!(
            "warning: same-order and different-order 1-SD intervals do not overlap \
             (same {:.2}±{:.2}, different {:.2}±{:.2})",
            report.same_order.mean,
            report.same_order.sd,
            report.different_order.mean,
            report.different_order.sd
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::InvalidPipeline(_) | Error::Parse(_) | Error::Json(_) => 2,
        Error::MissingMeasurements(_)
        | Error::Precondition(_)
        | Error::Checkpoint(_)
        | Error::EmptyData(_)
        | Error::Io(_) => 3,
        Error::NonFinite(_) | Error::ShapeMismatch(_) => 4,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.cmd {
        Cmd::GenData { force } => cmd_gen_data(&load_config(cli)?, *force),
        Cmd::Run { pipeline, store } => cmd_run(&load_config(cli)?, pipeline, store),
        Cmd::Estimate { pipeline, store } => cmd_estimate(&load_config(cli)?, pipeline, store),
        Cmd::Compare { curve_a, curve_b } => cmd_compare(curve_a, curve_b),
        Cmd::Commute { ops, seeds } => cmd_commute(&load_config(cli)?, ops, seeds),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
