use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use frboost_core::evalbench::VerificationReport;
use frboost_core::runner::{self, ExperimentConfig, Preset, Stage};
use frboost_core::Error;

/// Runs one stage of the pretraining and evaluation pipeline.
///
/// Stages: prep, train-gan, train-encoder, pretrain-ae, pretrain-vae,
/// augment-interp, train-facerec, build-pairs, embed, evaluate, fid.
/// `all` runs prep through evaluate plus fid with the configured init;
/// `compare A.json B.json` prints the delta table of two reports.
#[derive(Parser, Debug)]
#[command(name = "frboost", version)]
struct Cli {
    stage: String,
    /// Report files for `compare`.
    reports: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["desk", "paper"])]
    preset: Option<String>,
    /// Experiment directory; defaults to `runs/<config hash prefix>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Prerequisite { .. } => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

fn pipeline(cfg: &ExperimentConfig) -> Vec<Stage> {
    let mut stages = vec![Stage::Prep, Stage::TrainGan];
    match cfg.data.init.as_str() {
        "ae" => stages.push(Stage::PretrainAe),
        "vae" => stages.push(Stage::PretrainVae),
        _ => {}
    }
    if cfg.data.init == "encoder" || cfg.data.use_interpolation {
        stages.push(Stage::TrainEncoder);
    }
    if cfg.data.use_interpolation {
        stages.push(Stage::AugmentInterp);
    }
    stages.extend([Stage::TrainFacerec, Stage::BuildPairs, Stage::Embed, Stage::Evaluate, Stage::Fid]);
    stages
}

fn run(cli: Cli) -> Result<(), Error> {
    if cli.stage == "compare" {
        let [a, b] = cli.reports.as_slice() else {
            return Err(Error::Argument("compare takes two report files".into()));
        };
        let table = runner::compare_runs(&VerificationReport::load(a)?, &VerificationReport::load(b)?)?;
        print!("{table}");
        return Ok(());
    }
    let stages = if cli.stage == "all" { None } else { Some(vec![cli.stage.parse::<Stage>()?]) };
    if !cli.reports.is_empty() {
        return Err(Error::Argument(format!("unexpected arguments after `{}`", cli.stage)));
    }
    let path = cli.config.ok_or_else(|| Error::Config("--config is required".into()))?;
    let preset = cli.preset.map(|p| p.parse::<Preset>()).transpose()?;
    let cfg = ExperimentConfig::load(&path, preset, cli.seed)?;
    let out = cli.out.unwrap_or_else(|| PathBuf::from("runs").join(&cfg.hash()[..12]));
    for stage in stages.unwrap_or_else(|| pipeline(&cfg)) {
        for artifact in runner::run_stage(stage, &cfg, &out)? {
            println!("{stage}\t{}", artifact.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
