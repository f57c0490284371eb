use std::path::Path;
use std::process::{Command, Output};

use frboost_core::testing::tiny_experiment;

fn frboost(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frboost")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

fn write_config(dir: &Path, v: &serde_json::Value) -> String {
    let p = dir.join("exp.json");
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.display().to_string()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_experiment());
    let out = dir.path().join("exp").display().to_string();

    let o = frboost(&["train-encoder", "--config", &cfg, "--out", &out], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-gan"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"gan": {"resolution": 12}}"#).unwrap();
    let o = frboost(&["prep", "--config", bad.to_str().unwrap(), "--out", &out], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(frboost(&["prep", "--out", &out], dir.path()).status.code(), Some(2));
    assert_eq!(frboost(&["prep", "--config", "/nonexistent.json"], dir.path()).status.code(), Some(2));
    assert_eq!(frboost(&["prep", "--config", &cfg, "--preset", "huge"], dir.path()).status.code(), Some(2));

    let mut nan = tiny_experiment();
    nan["finetune"]["lr0"] = 1e30.into();
    nan["finetune"]["margin_s"] = 1e6.into();
    let nan_cfg = dir.path().join("nan.json");
    std::fs::write(&nan_cfg, nan.to_string()).unwrap();
    let nan_out = dir.path().join("nan").display().to_string();
    assert!(frboost(&["prep", "--config", nan_cfg.to_str().unwrap(), "--out", &nan_out], dir.path()).status.success());
    let mut sc = nan.clone();
    sc["data"]["init"] = "scratch".into();
    std::fs::write(&nan_cfg, sc.to_string()).unwrap();
    let o = frboost(&["train-facerec", "--config", nan_cfg.to_str().unwrap(), "--out", &nan_out], dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn full_pipeline_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = tiny_experiment();
    v["data"]["init"] = "scratch".into();
    let cfg = write_config(dir.path(), &v);
    let a = dir.path().join("a").display().to_string();
    let o = frboost(&["all", "--config", &cfg, "--out", &a], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("verification.json"));

    let b = dir.path().join("b").display().to_string();
    let o = frboost(&["all", "--config", &cfg, "--out", &b, "--seed", "11"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let ra = format!("{a}/reports/verification.json");
    let rb = format!("{b}/reports/verification.json");
    let o = frboost(&["compare", &ra, &ra], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("increase") && text.contains("+0.00"));
    let o = frboost(&["compare", &ra, &rb], dir.path());
    assert!(o.status.code() == Some(0) || o.status.code() == Some(1));

    // Default output directory is keyed by the config hash.
    let o = frboost(&["prep", "--config", &cfg], dir.path());
    assert!(o.status.success());
    assert_eq!(std::fs::read_dir(dir.path().join("runs")).unwrap().count(), 1);
}
