//! End-to-end runs of the `plr` binary on a small synthetic log.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

#[rustfmt::skip]
const SMALL: &[&str] = &[
    "-s", "synth_users=80",
    "-s", "synth_items=40",
    "-s", "d=8",
    "-s", "layers=1",
    "-s", "max_epochs=1",
    "-s", "batch_size=32",
];

fn plr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = plr(dir, args);
    assert!(
        out.status.success(),
        "plr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn trained(dir: &Path, extra: &[&str]) {
    ok(dir, &with_small(&["synth", "--seed", "3"]));
    let mut args = with_small(&["train", "--data", "synthetic.tsv", "--seed", "3"]);
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn pipeline_writes_replayable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d, &[]);
    for f in [
        "synthetic.tsv",
        "synthetic.json",
        "run/model.ckpt",
        "run/history.csv",
        "run/config.txt",
        "run/train.json",
    ] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(d.join("run/history.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,valid_ndcg@10\n"));

    ok(
        d,
        &with_small(&[
            "eval",
            "--data",
            "synthetic.tsv",
            "--checkpoint",
            "run/model.ckpt",
            "--out",
            "m.json",
        ]),
    );
    let m = json(&d.join("m.json"));
    assert_eq!(m["schema_version"], 1);
    assert_eq!(m["seed"], 0);
    assert_eq!(m["config"]["checkpoint"]["source"], "flag");
    assert_eq!(m["config"]["d"]["value"], 8);
    assert_eq!(m["result"]["metrics"].as_array().unwrap().len(), 3);

    // the resolved config replays the training run's settings
    ok(
        d,
        &[
            "eval",
            "--config",
            "run/config.txt",
            "--checkpoint",
            "run/model.ckpt",
            "--out",
            "m2.json",
        ],
    );
    let m2 = json(&d.join("m2.json"));
    assert_eq!(
        m2["result"]["metrics"],
        json(&d.join("run/train.json"))["result"]["test"]["metrics"]
    );
}

#[test]
fn prepared_dataset_matches_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d, &[]);
    ok(
        d,
        &with_small(&["prepare", "--data", "synthetic.tsv", "--out", "ds.json"]),
    );
    let from_log = ok(
        d,
        &with_small(&[
            "eval",
            "--data",
            "synthetic.tsv",
            "--checkpoint",
            "run/model.ckpt",
            "--out",
            "a.json",
        ]),
    );
    let from_json = ok(
        d,
        &with_small(&[
            "eval",
            "--data",
            "ds.json",
            "--checkpoint",
            "run/model.ckpt",
            "--out",
            "b.json",
        ]),
    );
    assert_eq!(from_log.stdout, from_json.stdout);
    assert_eq!(
        json(&d.join("a.json"))["result"]["metrics"],
        json(&d.join("b.json"))["result"]["metrics"]
    );
}

#[test]
fn gate_ablation_on_one_stream_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d, &["-s", "M=1"]);
    let common = ["--data", "synthetic.tsv", "--checkpoint", "run/model.ckpt"];
    let mut eval = with_small(&["eval", "--out", "e.json"]);
    eval.extend_from_slice(&common);
    ok(d, &eval);
    let mut abl = with_small(&["ablate", "--variant", "no-mors", "--out", "a.json"]);
    abl.extend_from_slice(&common);
    ok(d, &abl);
    let a = json(&d.join("a.json"));
    assert_eq!(a["result"]["retrained"], false);
    let strip = |mut v: Value| {
        v.as_object_mut().unwrap().remove("runtime_seconds");
        v
    };
    assert_eq!(
        strip(a["result"]["metrics"].clone()),
        strip(json(&d.join("e.json"))["result"].clone())
    );
}

#[test]
fn analysis_commands_run_on_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d, &[]);
    let common = ["--data", "synthetic.tsv", "--checkpoint", "run/model.ckpt"];
    for (cmd, out) in [
        ("ceiling", "c.json"),
        ("robustness", "r.json"),
        ("dump-attention", "att.json"),
    ] {
        let mut args = with_small(&[cmd, "--out", out]);
        args.extend_from_slice(&common);
        ok(d, &args);
    }
    let c = json(&d.join("c.json"));
    assert_eq!(c["passed"], true);
    let r = json(&d.join("r.json"));
    assert_eq!(r["result"].as_array().unwrap().len(), 3);
    let att = json(&d.join("att.json"));
    assert_eq!(att["result"]["reasoning"].as_array().unwrap().len(), 2 * 2);

    let mut flops = vec!["flops", "--out", "f.json"];
    flops.extend_from_slice(&common);
    ok(d, &flops);
    assert!(json(&d.join("f.json"))["result"]["latency"].is_object());
}

#[test]
fn reference_scale_flops_pass_the_band() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["flops", "--reference-scale", "--out", "f.json"]);
    let f = json(&dir.path().join("f.json"));
    let ratio = f["result"]["flops"]["ratio_vs_base"].as_f64().unwrap();
    assert!((1.03..=1.08).contains(&ratio), "{ratio}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("ratio"));
}

#[test]
fn theory_exit_status_follows_assertions() {
    let dir = tempfile::tempdir().unwrap();
    let out = plr(
        dir.path(),
        &[
            "theory",
            "--out",
            "t.json",
            "-s",
            "jensen_trials=200",
            "-s",
            "decay_trials=20",
            "-s",
            "specialization_trials=20",
            "-s",
            "gating_trials=50",
        ],
    );
    let t = json(&dir.path().join("t.json"));
    let passed = t["passed"].as_bool().unwrap();
    assert_eq!(out.status.code(), Some(if passed { 0 } else { 1 }));
    assert_eq!(t["result"]["examples"].as_array().unwrap().len(), 3);
}

#[test]
fn errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = plr(d, &["eval", "--data", "x.tsv", "--checkpoint", "nope.ckpt"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.ckpt"));

    let no_ckpt = plr(d, &["ceiling", "--data", "x.tsv"]);
    assert_eq!(no_ckpt.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&no_ckpt.stderr).contains("checkpoint"));

    let bad = plr(d, &["flops", "-s", "lambda=-0.5"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("lambda"));

    std::fs::write(d.join("c.txt"), "streams = 2\nwidth = 3\n").unwrap();
    let unknown = plr(d, &["flops", "--config", "c.txt"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("width"));
}

#[test]
fn file_and_flag_precedence_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.txt"), "M = 3  # file value\nsteps = 4\n").unwrap();
    ok(
        d,
        &["flops", "--config", "c.txt", "-s", "M=2", "--out", "f.json"],
    );
    let f = json(&d.join("f.json"));
    assert_eq!(
        f["config"]["streams"],
        serde_json::json!({"value": 2, "source": "flag"})
    );
    assert_eq!(
        f["config"]["steps"],
        serde_json::json!({"value": 4, "source": "file"})
    );
    assert_eq!(f["result"]["flops"]["config"]["streams"], 2);
    assert_eq!(f["result"]["flops"]["config"]["steps"], 4);
}
