use std::path::Path;
use std::process::{Command, Output};

fn pipelab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pipelab"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let cfg = r#"{
        "task": {"kind": "majority", "vocab_size": 16, "min_len": 4, "max_len": 16,
                 "n_classes": 2, "n_train": 48, "n_dev": 16, "n_test": 48, "seed": 0},
        "model": {"n_layers": 4, "d_model": 32, "n_heads": 4, "d_head": 8, "d_ff": 64,
                  "vocab_size": 16, "max_len": 16, "n_classes": 2},
        "train": {"learning_rate": 0.001, "epochs": 1, "batch_size": 8, "seed": 0},
        "seeds": [1],
        "out_dir": "out"
    }"#;
    std::fs::write(dir.join("cfg.json"), cfg).unwrap();
    "cfg.json".into()
}

#[test]
fn gen_data_is_deterministic_and_guards_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = pipelab(tmp.path(), &["--config", &cfg, "gen-data"]);
    assert!(out.status.success(), "{out:?}");
    let path = tmp.path().join("out/data/majority-1.json");
    let first = std::fs::read(&path).unwrap();

    // second run without --force refuses, exit 3
    let out = pipelab(tmp.path(), &["--config", &cfg, "gen-data"]);
    assert_eq!(out.status.code(), Some(3));

    let out = pipelab(tmp.path(), &["--config", &cfg, "gen-data", "--force"]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn unknown_task_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pipelab(tmp.path(), &["--task", "sarcasm", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_pipeline_order_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = pipelab(tmp.path(), &["--config", &cfg, "run", "--pipeline", "PD"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("D after P"), "{err}");
}

#[test]
fn run_and_estimate_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    for p in ["O", "D", "E"] {
        let out = pipelab(tmp.path(), &["--config", &cfg, "run", "--pipeline", p]);
        assert!(out.status.success(), "{p}: {out:?}");
    }
    // curve CSV schema: header + one row per default threshold
    let csv = std::fs::read_to_string(tmp.path().join("out/majority/1/E.curve.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "threshold,avg_exit_layer,mean_macs,wallclock_ms,accuracy"
    );
    assert_eq!(lines.count(), 9);

    let out = pipelab(tmp.path(), &["--config", &cfg, "estimate", "--pipeline", "ED"]);
    assert!(out.status.success(), "{out:?}");
    assert!(tmp.path().join("out/majority/1/ED.estimate.csv").exists());

    // P was never run, so PQ-bearing estimation is a missing-prerequisite
    let out = pipelab(tmp.path(), &["--config", &cfg, "estimate", "--pipeline", "PQ"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn compare_distances_and_disjoint_ranges() {
    let tmp = tempfile::tempdir().unwrap();
    let header = "threshold,avg_exit_layer,mean_macs,wallclock_ms,accuracy\n";
    let a = format!("{header}0.5,1,1,0,0.80\n1.01,2,2,0,0.90\n");
    let b = format!("{header}0.5,1,1,0,0.70\n1.01,2,2,0,0.95\n");
    let c = format!("{header}0.5,1,5,0,0.70\n1.01,2,6,0,0.95\n");
    std::fs::write(tmp.path().join("a.csv"), &a).unwrap();
    std::fs::write(tmp.path().join("b.csv"), &b).unwrap();
    std::fs::write(tmp.path().join("c.csv"), &c).unwrap();

    let out = pipelab(tmp.path(), &["compare", "a.csv", "a.csv"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.0000");

    let out = pipelab(tmp.path(), &["compare", "a.csv", "b.csv"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "10.0000");

    let out = pipelab(tmp.path(), &["compare", "a.csv", "c.csv"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn commute_emits_report_with_pair_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = pipelab(
        tmp.path(),
        &["--config", &cfg, "commute", "--ops", "DE", "--seeds", "1,2,3"],
    );
    assert!(out.status.success(), "{out:?}");
    let csv = std::fs::read_to_string(tmp.path().join("out/commute-majority-DE.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "dataset,operator_set,group,mean,sd,n_pairs,overlap_1sd");
    assert!(rows[1].starts_with("majority,DE,same-order,"));
    assert!(rows[2].starts_with("majority,DE,different-order,"));
    assert!(rows[1].contains(",6,"));
    assert!(rows[2].contains(",9,"));
}
