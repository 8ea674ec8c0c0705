use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &[&str] = &[
    "--image-size",
    "8",
    "--patch-size",
    "4",
    "--d-model",
    "16",
    "--heads",
    "4",
    "--depth",
    "2",
    "--channels",
    "1",
];

fn gqa(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gqa"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("GQA_DATA_DIR")
        .output()
        .expect("spawn gqa")
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Value {
    let mut args = vec!["train", "--out", out, "--batch-size", "8"];
    args.extend_from_slice(TINY);
    if !extra.contains(&"--n-per-class") {
        args.extend_from_slice(&["--n-per-class", "8"]);
    }
    args.extend_from_slice(extra);
    ok_json(&gqa(&args, dir))
}

#[test]
fn fresh_checkpoint_scores_chance_on_ten_classes() {
    let dir = tempfile::tempdir().unwrap();
    train(
        dir.path(),
        "fresh.gqac",
        &["--steps", "0", "--num-classes", "10", "--n-per-class", "40"],
    );
    let eval = ok_json(&gqa(
        &["eval", "--in", "fresh.gqac", "--n-per-class", "40"],
        dir.path(),
    ));
    assert_eq!(eval["examples"], 400);
    let acc = eval["accuracy"].as_f64().unwrap();
    assert!((0.03..=0.2).contains(&acc), "accuracy {acc}");
    assert_eq!(eval["config"]["command"], "eval");
}

#[test]
fn training_is_deterministic_for_every_dynamic_variant() {
    let dir = tempfile::tempdir().unwrap();
    for variant in ["pgqa", "dgqa-diff", "kdgqa"] {
        let common = [
            "--variant",
            variant,
            "--steps",
            "6",
            "--window",
            "2",
            "--seed",
            "5",
        ];
        train(dir.path(), "a.gqac", &common);
        train(dir.path(), "b.gqac", &common);
        let a = fs::read(dir.path().join("a.gqac")).unwrap();
        let b = fs::read(dir.path().join("b.gqac")).unwrap();
        assert!(a == b, "{variant} checkpoints differ");
        let strip = |p: &str| {
            fs::read_to_string(dir.path().join(p))
                .unwrap()
                .lines()
                .map(|l| {
                    let mut v: Value = serde_json::from_str(l).unwrap();
                    if let Some(o) = v.as_object_mut() {
                        o.remove("seconds");
                    }
                    v
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip("a-run/alloc.jsonl"), strip("b-run/alloc.jsonl"));
        assert_eq!(strip("a-run/steps.jsonl"), strip("b-run/steps.jsonl"));
    }
}

#[test]
fn run_directory_logs_carry_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let summary = train(
        dir.path(),
        "m.gqac",
        &["--variant", "dgqa-ema", "--steps", "5", "--window", "2"],
    );
    assert_eq!(summary["steps"], 5);
    let run = dir.path().join("m-run");
    for file in ["steps.jsonl", "alloc.jsonl"] {
        let text = fs::read_to_string(run.join(file)).unwrap();
        let header: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(
            header["config"]["model"]["attention"]["variant"], "dgqa-ema",
            "{file}"
        );
    }
    let steps = fs::read_to_string(run.join("steps.jsonl")).unwrap();
    assert_eq!(steps.lines().count(), 6);
    let metrics: Value =
        serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["metrics"]["losses"].as_array().unwrap().len(), 5);
    // events at steps 0, 2, 4 for both layers
    assert_eq!(summary["allocation_events"], 6);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"variant": "mqa", "steps": 3, "lr": 0.001, "seed": 9, "depth": 1}"#,
    )
    .unwrap();
    let s = train(
        dir.path(),
        "c.gqac",
        &["--config", "cfg.json", "--steps", "4"],
    );
    assert_eq!(s["steps"], 4);
    assert_eq!(s["config"]["model"]["attention"]["variant"], "mqa");
    assert_eq!(s["config"]["model"]["attention"]["kv_heads"], 1);
    assert_eq!(s["config"]["train"]["lr"], 0.001);
    assert_eq!(s["config"]["seed"], 9);
    // the flag beats the file's depth
    assert_eq!(s["config"]["model"]["depth"], 2);

    fs::write(dir.path().join("bad.json"), r#"{"stepz": 3}"#).unwrap();
    let out = gqa(
        &["train", "--config", "bad.json", "--out", "x.gqac"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unknown keys"), "{}", stderr(&out));
}

#[test]
fn usage_and_validation_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = gqa(
        &["train", "--variant", "bogus", "--out", "x.gqac"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown variant"));
    let out = gqa(&["train", "--no-such-flag", "--out", "x.gqac"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = gqa(
        &[
            "train",
            "--variant",
            "mha",
            "--kv-heads",
            "2",
            "--out",
            "x.gqac",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("mha needs kv_heads"),
        "{}",
        stderr(&out)
    );
    assert!(!dir.path().join("x.gqac").exists());
}

#[test]
fn convert_rejects_non_divisor_and_pools_otherwise() {
    let dir = tempfile::tempdir().unwrap();
    train(
        dir.path(),
        "mha.gqac",
        &["--variant", "mha", "--steps", "2"],
    );
    let out = gqa(
        &[
            "convert",
            "--in",
            "mha.gqac",
            "--kv-heads",
            "3",
            "--out",
            "g.gqac",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("cannot pool 4"));
    let report = ok_json(&gqa(
        &[
            "convert",
            "--in",
            "mha.gqac",
            "--kv-heads",
            "2",
            "--out",
            "g.gqac",
        ],
        dir.path(),
    ));
    assert_eq!(report["report"]["target_kv_heads"], 2);
    assert_eq!(report["config"]["variant"], "gqa");
    // dk 4, d_model 16, two layers: K and V lose 2 heads of 4 x 17 each
    assert_eq!(report["report"]["parameter_delta"], 2 * 2 * 2 * 4 * 17);
    let ft = ok_json(&gqa(
        &[
            "finetune",
            "--in",
            "g.gqac",
            "--steps",
            "3",
            "--batch-size",
            "8",
            "--out",
            "f.gqac",
            "--n-per-class",
            "8",
        ],
        dir.path(),
    ));
    assert_eq!(ft["config"]["train"]["lr"], 1e-5);
    assert_eq!(ft["config"]["train"]["phase"], "finetune");
}

#[test]
fn bench_against_itself_is_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "bench",
        "--variants",
        "gqa,gqa",
        "--batch",
        "16",
        "--repeats",
        "6",
    ];
    args.extend_from_slice(&TINY[..10]);
    let report = ok_json(&gqa(&args, dir.path()));
    let rows = report["report"]["rows"].as_array().unwrap();
    assert_eq!(rows[0]["name"], "gqa");
    assert_eq!(rows[1]["name"], "gqa#2");
    let delta = rows[1]["delta_pct"].as_f64().unwrap();
    assert!(delta.abs() < 20.0, "delta {delta}%");
}

#[test]
fn analyze_alloc_on_static_and_crafted_logs() {
    let dir = tempfile::tempdir().unwrap();
    train(
        dir.path(),
        "g.gqac",
        &["--variant", "gqa", "--steps", "4", "--window", "1"],
    );
    let res = ok_json(&gqa(
        &["analyze", "alloc", "--in", "g-run/alloc.jsonl"],
        dir.path(),
    ));
    assert_eq!(res["runs"][0]["events"], 8);
    assert_eq!(res["runs"][0]["nonuniform_fraction"], 0.0);

    let mut crafted = String::new();
    for i in 0..10 {
        let alloc = if i % 3 == 1 { "[3,1]" } else { "[2,2]" };
        crafted.push_str(&format!(
            "{{\"step\":{i},\"layer\":0,\"alloc\":{alloc},\"norms\":[1.0,1.0]}}\n"
        ));
    }
    fs::write(dir.path().join("crafted.jsonl"), crafted).unwrap();
    let out = gqa(&["analyze", "alloc", "--in", "crafted.jsonl"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(1),
        "needs head counts without a header"
    );
    let res = ok_json(&gqa(
        &[
            "analyze",
            "alloc",
            "--in",
            "crafted.jsonl",
            "--heads",
            "4",
            "--kv-heads",
            "2",
        ],
        dir.path(),
    ));
    assert_eq!(res["runs"][0]["nonuniform_fraction"], 0.3);
}

#[test]
fn analyze_heads_then_blend() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), "g.gqac", &["--variant", "gqa", "--steps", "2"]);
    train(dir.path(), "m.gqac", &["--variant", "mha", "--steps", "2"]);
    for (ck, csv) in [("g.gqac", "g.csv"), ("m.gqac", "m.csv")] {
        let out = gqa(
            &[
                "analyze",
                "heads",
                "--in",
                ck,
                "--samples",
                "12",
                "--out",
                csv,
            ],
            dir.path(),
        );
        assert!(out.status.success(), "{}", stderr(&out));
        let summary: Value = serde_json::from_str(
            &fs::read_to_string(dir.path().join(format!("{csv}.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(summary["config"]["layer"], 1);
        // one head per group leaves no intra-group pairs
        assert_eq!(summary["intra_group_mean"].is_number(), ck == "g.gqac");
    }
    let text = fs::read_to_string(dir.path().join("g.csv")).unwrap();
    assert!(text.starts_with("head,h0,h1,h2,h3\n"));
    let fit = ok_json(&gqa(
        &[
            "analyze", "blend", "--target", "m.csv", "--gqa", "g.csv", "--mha", "m.csv",
        ],
        dir.path(),
    ));
    assert!((fit["lambda"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!(fit["residual"].as_f64().unwrap() < 1e-9);
}

#[test]
fn sweep_kv_writes_sorted_csv_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "sweep-kv",
        "--gs",
        "4,1,2",
        "--steps",
        "2",
        "--batch-size",
        "8",
        "--n-per-class",
        "8",
        "--out",
        "s.csv",
    ];
    args.extend_from_slice(TINY);
    let out = gqa(&args, dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let gs: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(gs, ["1", "2", "4"]);
    assert!(csv.lines().nth(3).unwrap().ends_with("true"));
    let cfg: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s.csv.config.json")).unwrap())
            .unwrap();
    assert_eq!(cfg["command"], "sweep-kv");
}

#[test]
fn data_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gqa"))
        .args(["train", "--dataset", "mnist", "--out", "x.gqac"])
        .current_dir(dir.path())
        .env("GQA_DATA_DIR", "/nonexistent/gqa-data")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("/nonexistent/gqa-data"),
        "{}",
        stderr(&out)
    );
    let out = gqa(
        &["train", "--dataset", "mnist", "--out", "x.gqac"],
        dir.path(),
    );
    assert!(stderr(&out).contains("GQA_DATA_DIR"), "{}", stderr(&out));
}
