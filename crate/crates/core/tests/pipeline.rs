use std::path::Path;

use frboost_core::evalbench::VerificationReport;
use frboost_core::runner::{self, ExperimentConfig, FidReport, Stage};
use frboost_core::testing::tiny_experiment;

fn run_all(cfg: &ExperimentConfig, dir: &Path, stages: &[Stage]) {
    for &s in stages {
        runner::run_stage(s, cfg, dir).unwrap_or_else(|e| panic!("{s}: {e}"));
    }
}

const FULL: [Stage; 11] = [
    Stage::Prep,
    Stage::TrainGan,
    Stage::TrainEncoder,
    Stage::PretrainAe,
    Stage::PretrainVae,
    Stage::AugmentInterp,
    Stage::TrainFacerec,
    Stage::BuildPairs,
    Stage::Embed,
    Stage::Evaluate,
    Stage::Fid,
];

#[test]
fn tiny_pipeline_end_to_end_and_repeatable() {
    let mut file = tiny_experiment();
    file["data"]["use_interpolation"] = true.into();
    let cfg = ExperimentConfig::resolve(&file, None, None).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(&cfg, a.path(), &FULL);
    run_all(&cfg, b.path(), &FULL);

    let report = VerificationReport::load(&a.path().join("reports/verification.json")).unwrap();
    assert!(!report.per_group.is_empty());
    for m in report.per_group.values() {
        let acc = m.accuracy.unwrap();
        assert!((0.0..=100.0).contains(&acc));
    }
    assert!(a.path().join("reports/verification.csv").exists());
    let fid: FidReport = serde_json::from_str(&std::fs::read_to_string(a.path().join("reports/fid.json")).unwrap()).unwrap();
    assert!(fid.fid.is_finite() && fid.fid >= 0.0);

    // Every artifact named in the run log exists.
    let runs = runner::read_runs(a.path()).unwrap();
    assert_eq!(runs.len(), FULL.len());
    for r in &runs {
        assert!(r.error.is_none(), "{r:?}");
        assert_eq!(r.config_hash, cfg.hash());
        for art in &r.artifacts {
            let p = Path::new(art);
            assert!(p.is_absolute() && p.exists() || a.path().join(p).exists(), "{art}");
        }
    }

    // Same config and seed: identical logs and report.
    for log in ["train-gan", "train-encoder", "pretrain-ae", "pretrain-vae", "train-facerec"] {
        let la = std::fs::read_to_string(a.path().join(format!("logs/{log}.jsonl"))).unwrap();
        let lb = std::fs::read_to_string(b.path().join(format!("logs/{log}.jsonl"))).unwrap();
        assert_eq!(la, lb, "{log}");
    }
    assert_eq!(report, VerificationReport::load(&b.path().join("reports/verification.json")).unwrap());
}

#[test]
fn scratch_and_baseline_inits_share_the_harness() {
    let dir = tempfile::tempdir().unwrap();
    let mut file = tiny_experiment();
    file["data"]["init"] = "vae".into();
    let vae = ExperimentConfig::resolve(&file, None, None).unwrap();
    run_all(&vae, dir.path(), &[Stage::Prep]);
    match runner::run_stage(Stage::TrainFacerec, &vae, dir.path()) {
        Err(frboost_core::Error::Prerequisite { upstream, .. }) => assert_eq!(upstream, "pretrain-vae"),
        other => panic!("{other:?}"),
    }
    run_all(&vae, dir.path(), &[Stage::PretrainVae, Stage::TrainFacerec, Stage::BuildPairs, Stage::Embed, Stage::Evaluate]);

    file["data"]["init"] = "scratch".into();
    let scratch = ExperimentConfig::resolve(&file, None, None).unwrap();
    run_all(&scratch, dir.path(), &[Stage::TrainFacerec, Stage::Embed, Stage::Evaluate]);
    assert!(dir.path().join("reports/verification.json").exists());
}
