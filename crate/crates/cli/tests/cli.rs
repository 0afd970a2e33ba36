use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gridspike::pipeline::PipelineConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gridspike"))
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&PipelineConfig::tiny()).unwrap()).unwrap();
    path
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_all_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = run(&["run-all"], &cfg, &a);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["run-all"], &cfg, &b);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read(a.join("metrics.json")).unwrap();
    assert_eq!(metrics, fs::read(b.join("metrics.json")).unwrap());

    for f in [
        "energy.json",
        "sparsity.csv",
        "metrics.json",
        "evaluation.json",
        "acc_vs_timesteps.csv",
    ] {
        fs::remove_file(a.join(f)).unwrap();
    }
    let o = run(&["run-all", "--resume"], &cfg, &a);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "energy.json",
        "sparsity.csv",
        "metrics.json",
        "evaluation.json",
        "acc_vs_timesteps.csv",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn stages_run_one_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    for stage in [
        "generate",
        "select",
        "encode",
        "train-unsup",
        "train-sup",
        "convert",
        "evaluate",
        "energy-report",
    ] {
        let o = run(&[stage], &cfg, &out);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    for f in [
        "dataset/manifest.json",
        "selection.json",
        "mc_curves.csv",
        "encoding.json",
        "splits.json",
        "models/snn_fold0.json",
        "models/ifsnn_fold1.json",
        "models/conv_ifsnn.json",
        "metrics.json",
        "energy.json",
        "sparsity.csv",
        "acc_vs_timesteps.csv",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let header = fs::read_to_string(out.join("mc_curves.csv")).unwrap();
    assert!(header.starts_with("k,proposed_error,random_mean,random_min,random_max"));
    assert!(fs::read_to_string(out.join("sparsity.csv"))
        .unwrap()
        .starts_with("layer,rate"));

    let o = run(&["infer", "--event", "3", "--timesteps", "20"], &cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["trace"].as_array().unwrap().len(), 20);

    let o = run(&["infer", "--event", "3", "--unsupervised"], &cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = run(&["encode", "--dump-event", "0"], &cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("spikes_event0.csv").exists());
}

#[test]
fn missing_generator_config_names_generate() {
    let dir = tempfile::tempdir().unwrap();
    let mut tiny = PipelineConfig::tiny();
    tiny.generator_config = Some("no_such_generator.json".into());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, serde_json::to_string(&tiny).unwrap()).unwrap();
    let o = run(&["run-all"], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`generate`"), "{}", stderr(&o));
}

#[test]
fn missing_upstream_artifact_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = run(&["select"], &cfg, &dir.path().join("empty"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`select`"), "{}", stderr(&o));
}

#[test]
fn config_flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = bin()
        .args(["config", "--seed", "9", "--timesteps", "77", "--percentile", "99"])
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(o.status.success());
    let c: PipelineConfig = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(c.seed, 9);
    assert_eq!(c.supervised.timesteps, 77);
    assert_eq!(c.cv.n_folds, 2);
}

#[test]
fn unreadable_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["generate"], &dir.path().join("absent.json"), &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
}
