use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
name = "tiny"
seed = 3
family = "flow"
regime = "base"

[dataset]
train = 12
eval = 10
side = 4

[train]
epochs = 2
batch_size = 4

[model]
flow_layers = 2
flow_hidden = 4

[strip]
bins = 5
per_bin = 2
"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_density-rank"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn error_kind(o: &Output) -> String {
    assert!(!o.status.success());
    let v: Value = serde_json::from_slice(&o.stderr).expect("stderr is JSON");
    v["error"]["kind"].as_str().expect("kind").to_string()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("cfg.toml");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn help_goes_to_stdout_with_success() {
    let o = bin(&["--help"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("train"));
}

#[test]
fn errors_are_json_on_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml").display().to_string();
    assert_eq!(error_kind(&bin(&["train", "--config", &missing])), "io");

    let cfg = write_config(tmp.path(), "name = \"x\"\nbogus = 1\n");
    assert_eq!(error_kind(&bin(&["train", "--config", &cfg])), "config");

    assert_eq!(error_kind(&bin(&["train"])), "usage");
}

#[test]
fn train_report_and_tamper_detection() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    let out_s = out.display().to_string();

    let v = stdout_json(&bin(&["train", "--config", &cfg, "--out", &out_s]));
    assert_eq!(v["ok"], true);
    for f in ["config.toml", "manifest.json", "scores_train.csv", "ranking_eval.json", "strip_eval.ppm", "model.ckpt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(!out.join(".lock").exists());

    let r = stdout_json(&bin(&["report", "--out", &out_s]));
    assert_eq!(r["name"], "tiny");
    assert_eq!(r["regime"], "base");
    assert_eq!(r["lowest_density_id"], v["lowest_density_id"]);

    fs::write(out.join("scores_train.csv"), "id,total\n").unwrap();
    assert_eq!(error_kind(&bin(&["report", "--out", &out_s])), "corrupt");
}

#[test]
fn locked_output_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("busy");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), b"").unwrap();
    let o = bin(&["train", "--config", &cfg, "--out", &out.display().to_string()]);
    assert_eq!(error_kind(&o), "locked");
    // the other run's lock is left alone
    assert!(out.join(".lock").exists());
}

#[test]
fn downstream_commands_consume_train_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let p = |s: &str| tmp.path().join(s).display().to_string();
    stdout_json(&bin(&["train", "--config", &cfg, "--out", &p("base")]));

    let scores = tmp.path().join("base").join("scores_eval_e2.csv");
    assert!(scores.exists());
    let s = scores.display().to_string();

    stdout_json(&bin(&["rank", "--scores", &s, "--out", &p("rank")]));
    assert!(tmp.path().join("rank/ranking.json").exists());

    stdout_json(&bin(&["strip", "--config", &cfg, "--scores", &s, "--out", &p("strip")]));
    assert!(tmp.path().join("strip/strip_eval.ppm").exists());

    let flow = format!("flow={s}");
    stdout_json(&bin(&["matrix", "--config", &cfg, "--scores", &flow, "--kendall", "--out", &p("matrix")]));
    for f in ["matrix_spearman.json", "matrix_spearman.svg", "matrix_kendall.json"] {
        assert!(tmp.path().join("matrix").join(f).exists(), "{f} missing");
    }

    let ckpt = p("base/model.ckpt");
    let d = stdout_json(&bin(&["dominance", "--config", &cfg, "--checkpoint", &ckpt, "--out", &p("dom")]));
    assert_eq!(d["report"]["n"], 10);

    stdout_json(&bin(&["score", "--config", &cfg, "--checkpoint", &ckpt, "--split", "train", "--out", &p("score")]));
    let rescored = fs::read_to_string(tmp.path().join("score/scores_train.csv")).unwrap();
    assert_eq!(rescored, fs::read_to_string(tmp.path().join("base/scores_train.csv")).unwrap());

    let ldt = TINY.replace("regime = \"base\"", "regime = \"ldt10\"\nldt_fraction = 0.2");
    let ldt_cfg = tmp.path().join("ldt.toml");
    fs::write(&ldt_cfg, ldt).unwrap();
    let l = stdout_json(&bin(&[
        "ldt",
        "--config",
        &ldt_cfg.display().to_string(),
        "--base",
        &p("base"),
        "--out",
        &p("ldt"),
    ]));
    assert_eq!(l["report"]["subset_ids"].as_array().unwrap().len(), 3);
}
