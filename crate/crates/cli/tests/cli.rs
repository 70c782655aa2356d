use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn bisparse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bisparse"))
        .args(args)
        .current_dir(root())
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train_quick(out: &Path, iters: &str) -> Output {
    bisparse(&[
        "train",
        "--config",
        "configs/desk.conf",
        "--max-iters",
        iters,
        "--eval-interval",
        "5",
        "--seed",
        "3",
        "--val-data",
        "data/desk/val.jsonl",
        "--data-format",
        "jsonl",
        "--data",
        "data/desk/train.jsonl",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn missing_training_data_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = bisparse(&[
        "train",
        "--data",
        "no/such/file.txt",
        "--out",
        dir.path().to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no/such/file.txt"), "{}", stderr(&o));
}

#[test]
fn bad_config_keys_and_values_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "[attention]\nspan_dropp = 0.3\n").unwrap();
    let o = bisparse(&["params", "--config", conf.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("span_dropp"), "{}", stderr(&o));

    let o = bisparse(&["params", "--span-drop", "1.5"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("span_drop"), "{}", stderr(&o));

    let o = bisparse(&["params", "--config", "missing.conf"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing.conf"));
}

#[test]
fn train_writes_log_and_checkpoints_reproducibly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = train_quick(a.path(), "10");
    assert!(oa.status.success(), "{}", stderr(&oa));
    assert!(train_quick(b.path(), "10").status.success());
    let log = fs::read_to_string(a.path().join("train.log")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,lr,train_loss,val_loss"));
    let steps: Vec<usize> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (1..=10).collect::<Vec<_>>());
    assert!(a.path().join("last.ckpt").is_file());
    assert!(a.path().join("best.ckpt").is_file());
    assert_eq!(log, fs::read_to_string(b.path().join("train.log")).unwrap());
    assert_eq!(
        fs::read(a.path().join("last.ckpt")).unwrap(),
        fs::read(b.path().join("last.ckpt")).unwrap()
    );
}

#[test]
fn eval_json_matches_table_and_rejects_bad_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_quick(dir.path(), "5").status.success());
    let ckpt = dir.path().join("last.ckpt");
    let json_path = dir.path().join("report.json");
    let o = bisparse(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        "data/desk/val.jsonl",
        "--data-format",
        "jsonl",
        "--limit",
        "4",
        "--out",
        json_path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json_path).unwrap()).unwrap();
    let text = stdout(&o);
    let table_value = |row: &str, col: usize| -> f64 {
        let line = text.lines().find(|l| l.starts_with(row)).unwrap();
        line.split_whitespace().nth(col).unwrap().parse().unwrap()
    };
    let two = |x: &serde_json::Value| (x.as_f64().unwrap() * 100.0).round() / 100.0;
    for (row, key) in [("rouge1", "rouge1"), ("rouge2", "rouge2"), ("rougeL", "rougeL")] {
        assert_eq!(table_value(row, 1), two(&report[key]["precision"]));
        assert_eq!(table_value(row, 2), two(&report[key]["recall"]));
        assert_eq!(table_value(row, 3), two(&report[key]["f1"]));
    }
    assert_eq!(table_value("token", 3), two(&report["token_f1"]));
    assert_eq!(report["examples"], 4);
    assert!(report["perplexity"].as_f64().unwrap() >= 1.0);

    let mismatch = bisparse(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        "data/desk/val.jsonl",
        "--n-head",
        "8",
    ]);
    assert!(!mismatch.status.success());
    assert!(stderr(&mismatch).contains("n_head"));

    let bytes = fs::read(&ckpt).unwrap();
    let cut = dir.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let o = bisparse(&[
        "eval",
        "--checkpoint",
        cut.to_str().unwrap(),
        "--data",
        "data/desk/val.jsonl",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("cut.ckpt"), "{}", stderr(&o));
}

#[test]
fn generate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_quick(dir.path(), "3").status.success());
    let ckpt = dir.path().join("last.ckpt");
    let run = |sampling: &str| {
        bisparse(&[
            "generate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--prompt",
            "In Porto,",
            "--max-new",
            "12",
            "--sampling",
            sampling,
            "--seed",
            "5",
        ])
    };
    for sampling in ["greedy", "top-k"] {
        let a = run(sampling);
        assert!(a.status.success(), "{}", stderr(&a));
        assert_eq!(a.stdout, run(sampling).stdout);
    }
}

#[test]
fn gradcheck_passes_and_the_fault_control_fails() {
    let o = bisparse(&["gradcheck", "--mechanism", "standard", "--seed", "0"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("max_rel_error"));
    let o = bisparse(&["gradcheck", "--mechanism", "hybrid", "--seed", "0", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn bench_writes_csv_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = bisparse(&[
        "bench",
        "--d-model",
        "32",
        "--n-head",
        "2",
        "--context-window",
        "64",
        "--lengths",
        "8,32,64",
        "--thresholds=-1e9,0,0.5",
        "--repeats",
        "1",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("T,retained_fraction,tokens_per_sec,peak_bytes"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![8.0, 32.0, 64.0]);
    assert!(rows.iter().all(|r| r[2] > 0.0 && r[3] > 0.0));
    let sweep = fs::read_to_string(dir.path().join("bench_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 3 * 3);

    let o = bisparse(&["bench", "--context-window", "64", "--lengths", "128", "--seed", "1"]);
    assert!(!o.status.success());
}

#[test]
fn params_reports_the_standard_baseline_delta() {
    let o = bisparse(&["params", "--mechanism", "sparse"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let total = text.lines().find(|l| l.starts_with("total")).unwrap();
    let cols: Vec<&str> = total.split_whitespace().collect();
    assert_eq!(cols[1..], ["103769856", "124441344", "-20671488"]);
}
