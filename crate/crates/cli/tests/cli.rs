use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn dcp(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_dcp"))
        .args(args)
        .output()
        .expect("run dcp");
    assert!(
        out.status.success(),
        "dcp {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gen_small(dir: &Path) -> String {
    let d = dir.to_str().unwrap();
    dcp(&[
        "gen-data",
        "--dist",
        "ldc",
        "--scale",
        "0.05",
        "--count",
        "24",
        "--mask",
        "mixed",
        "--token-budget",
        "384",
        "--heads",
        "2",
        "--kv-groups",
        "1",
        "--head-dim",
        "8",
        "--seed",
        "5",
        "--out",
        d,
    ]);
    dir.join("sequences.jsonl").to_str().unwrap().to_string()
}

const RUN: [&str; 8] = [
    "--block-size",
    "16",
    "--machines",
    "2",
    "--devices-per-machine",
    "2",
    "--eps-data",
    "0.3",
];

#[test]
fn simulate_is_exact_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let input = gen_small(tmp.path());
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let mut args = vec![
            "simulate",
            "--numeric",
            "--lookahead",
            "2",
            "--input",
            &input,
        ];
        args.extend(RUN);
        args.extend(["--out", out.to_str().unwrap()]);
        dcp(&args);
        reports.push(fs::read(out.join("reports.json")).unwrap());
        let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
        assert!(csv.lines().count() > 2, "{csv}");
    }
    assert_eq!(reports[0], reports[1]);
    let parsed: Vec<Value> = serde_json::from_slice(&reports[0]).unwrap();
    for r in &parsed {
        assert!(r["error"].is_null(), "{r}");
        assert!(r["max_abs_error"].as_f64().unwrap() <= 1e-10);
    }
}

#[test]
fn plan_compare_and_sweep_write_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let input = gen_small(tmp.path());
    let out = tmp.path().join("o");
    let o = out.to_str().unwrap();

    let mut args = vec!["plan", "--input", &input, "--out", o];
    args.extend(RUN);
    dcp(&args);
    let plan: Value =
        serde_json::from_str(&fs::read_to_string(out.join("iter0000/device000.json")).unwrap())
            .unwrap();
    assert_eq!(plan["device"], 0);
    assert!(plan["instructions"].as_array().is_some());

    let mut args = vec![
        "compare",
        "--baseline",
        "zigzag",
        "--input",
        &input,
        "--out",
        o,
    ];
    args.extend(RUN);
    dcp(&args);
    let csv = fs::read_to_string(out.join("compare.csv")).unwrap();
    assert!(csv.starts_with("iteration,baseline,"));
    assert!(csv.lines().nth(1).unwrap().contains(",zigzag,"));

    let mut args = vec![
        "sweep",
        "--param",
        "block_size",
        "--values",
        "8,16,32",
        "--input",
        &input,
        "--out",
        o,
    ];
    args.extend(RUN);
    dcp(&args);
    let rows: Vec<Value> =
        serde_json::from_str(&fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    let sizes: Vec<u64> = rows
        .iter()
        .map(|r| r["block_size"].as_u64().unwrap())
        .collect();
    assert_eq!(sizes, vec![8, 16, 32]);
}

#[test]
fn bad_arguments_fail() {
    let out = Command::new(env!("CARGO_BIN_EXE_dcp"))
        .args(["compare", "--baseline", "tree", "--input", "x.jsonl"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_dcp"))
        .args(["simulate", "--input", "/nonexistent/seqs.jsonl"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("reading"));
}
