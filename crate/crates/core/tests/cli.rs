use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use spdp::synthdata::read_dataset;
use spdp::tensor::checkpoint::Checkpoint;

const TINY: &[&str] = &[
    "--set",
    "data.scenes=12",
    "--set",
    "val_scenes=4",
    "--set",
    "train.epochs=2",
    "--set",
    "train.warmup_epochs=1",
    "--set",
    "model.layers=1",
];

fn spdp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spdp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = spdp(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY.iter().copied()).collect()
}

fn gen(dir: &Path) {
    ok(&with_tiny(&["gen", "--out", dir.to_str().unwrap()]));
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn gen_writes_both_splits_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let train = read_dataset(&data.join("train.jsonl")).unwrap();
    let val = read_dataset(&data.join("val.jsonl")).unwrap();
    assert_eq!((train.samples.len(), val.samples.len()), (12, 4));
    assert_ne!(train.samples[0], val.samples[0]);
    assert!(read(&data.join("config.json")).contains("\"val_scenes\": 4"));
}

#[test]
fn gen_is_reproducible_from_the_echoed_config() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    gen(&a);
    let cfg = a.join("config.json");
    let b = tmp.path().join("b");
    ok(&["gen", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    for f in ["train.jsonl", "train.jsonl.bin", "val.jsonl", "val.jsonl.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gen_to_unwritable_path_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = spdp(&with_tiny(&["gen", "--out", blocker.join("sub").to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_run_directory_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let mut logs = Vec::new();
    for run in ["r1", "r2"] {
        let out = tmp.path().join(run);
        ok(&with_tiny(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]));
        for f in ["config.json", "log.jsonl", "best.ckpt", "scores.csv", "scores.json"] {
            assert!(out.join(f).exists(), "{f}");
        }
        assert_eq!(read(&out.join("log.jsonl")).lines().count(), 2);
        logs.push((read(&out.join("log.jsonl")), fs::read(out.join("best.ckpt")).unwrap()));
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let run = tmp.path().join("run");
    let mut args = with_tiny(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    args.extend(["--set", "train.lr=0", "--set", "train.epochs=1"]);
    ok(&args);
    let trained = Checkpoint::load(&run.join("last.ckpt")).unwrap();
    let init = spdp::model::SpdpModel::new(serde_json::from_value(trained.meta["model"].clone()).unwrap(), 0)
        .unwrap()
        .to_checkpoint(None, serde_json::Value::Null);
    for (name, t) in &init.tensors {
        assert_eq!(trained.get(name), Some(t), "{name}");
    }
    assert_eq!(trained.meta["adam"]["step"], 3);
}

#[test]
fn resume_continues_the_step_counter_and_matches_a_full_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let d = data.to_str().unwrap();
    let full = tmp.path().join("full");
    let mut args = with_tiny(&["train", "--data", d, "--out", full.to_str().unwrap()]);
    args.extend(["--set", "train.epochs=3"]);
    ok(&args);

    let part = tmp.path().join("part");
    let p = part.to_str().unwrap();
    let mut first = with_tiny(&["train", "--data", d, "--out", p]);
    first.extend(["--set", "train.epochs=1"]);
    ok(&first);
    let mut second = with_tiny(&["train", "--data", d, "--out", p, "--resume"]);
    second.extend(["--set", "train.epochs=3"]);
    ok(&second);

    let steps: Vec<u64> = read(&part.join("log.jsonl"))
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps, vec![3, 6, 9]);
    assert_eq!(read(&part.join("log.jsonl")), read(&full.join("log.jsonl")));
    assert_eq!(
        fs::read(part.join("last.ckpt")).unwrap(),
        fs::read(full.join("last.ckpt")).unwrap()
    );
}

#[test]
fn eval_writes_scores_and_rejects_missing_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let run = tmp.path().join("run");
    ok(&with_tiny(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]));
    let ev = tmp.path().join("ev");
    let ckpt = run.join("best.ckpt");
    ok(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
    ]);
    // Same grouping as training's final scoring.
    assert_eq!(read(&ev.join("scores.csv")), read(&run.join("scores.csv")));
    let json: serde_json::Value = serde_json::from_str(&read(&ev.join("scores.json"))).unwrap();
    assert!(json["activity"]["F_a"].is_number());

    let missing = spdp(&[
        "eval",
        "--checkpoint",
        "/nonexistent/best.ckpt",
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn dimension_mismatch_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let mut args = with_tiny(&["train", "--data", data.to_str().unwrap()]);
    let out_dir = tmp.path().join("run");
    args.extend(["--out", out_dir.to_str().unwrap(), "--set", "model.d=16"]);
    let out = spdp(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension mismatch"));
}

#[test]
fn unknown_flags_fail_with_switch_listing() {
    let out = spdp(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for v in ["temporal", "euclid_st", "rp_only", "hierarchical", "gt_count"] {
        assert!(err.contains(v), "{v} missing from {err}");
    }
    assert_eq!(spdp(&["train", "--ppe", "sideways"]).status.code(), Some(1));
    assert_eq!(spdp(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_file_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"model.depth": 3}"#).unwrap();
    assert_eq!(spdp(&["gen", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn ablate_single_cell_matches_train_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let d = data.to_str().unwrap();
    let ab = tmp.path().join("ab");
    ok(&with_tiny(&[
        "ablate",
        "--data",
        d,
        "--out",
        ab.to_str().unwrap(),
        "--grid",
        "proximity=giou_s",
    ]));
    let table = read(&ab.join("ablation.csv"));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("cell,P_i,"));

    let run = tmp.path().join("run");
    ok(&with_tiny(&[
        "train",
        "--data",
        d,
        "--out",
        run.to_str().unwrap(),
        "--proximity",
        "giou_s",
    ]));
    let row = read(&run.join("scores.csv")).lines().nth(1).unwrap().to_string();
    assert_eq!(lines[1], format!("proximity-giou_s,{row}"));
    assert_eq!(
        read(&ab.join("proximity-giou_s/log.jsonl")),
        read(&run.join("log.jsonl"))
    );
}

#[test]
fn ablate_relation_grid_has_full_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let ab = tmp.path().join("ab");
    let mut args = with_tiny(&[
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ab.to_str().unwrap(),
    ]);
    args.extend(["--grid", "relation=rs_only,rp_only,both", "--set", "train.epochs=1"]);
    ok(&args);
    let table = read(&ab.join("ablation.csv"));
    let rows: Vec<Vec<&str>> = table.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let both = rows.iter().find(|r| r[0] == "relation-both").expect("both row");
    assert_eq!(both.len(), 14);
    assert!(both[1..].iter().all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)));
}

#[test]
fn ablate_rejects_invalid_cells() {
    let out = spdp(&["ablate", "--grid", "relation=maybe"]);
    assert_eq!(out.status.code(), Some(1));
    let out = spdp(&["ablate", "--grid", "heads=1,2"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn inspect_summarizes_both_file_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let out = ok(&["inspect", data.join("val.jsonl").to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("dataset: 4 scenes"));
    let run = tmp.path().join("run");
    ok(&with_tiny(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]));
    let out = ok(&["inspect", run.join("last.ckpt").to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("optimizer step: 6"));
    let junk = tmp.path().join("junk");
    fs::write(&junk, "hello\n").unwrap();
    assert_eq!(spdp(&["inspect", junk.to_str().unwrap()]).status.code(), Some(2));
}
