use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use jdbm::harness::{
    evaluate_stage, extract_feature_cache, load_dataset, oracle_self_check, pretrain, run_experiment,
    train_classifier_stage, train_generative, ExperimentConfig, GenerativeOutcome, Method, MetricsLog, RunControl,
};
use jdbm::DbmError;

#[derive(Parser)]
#[command(name = "jdbm", version, about = "Train and evaluate deep Boltzmann machine classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave wall-clock times out of the outputs.
    #[arg(long)]
    reproducible: bool,
}

#[derive(Args, Clone)]
struct Resume {
    /// Continue from the last generative checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop (resumably) once this many generative epochs are done.
    #[arg(long)]
    halt_after_epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Layerwise RBM pretraining and assembly into a DBM.
    Pretrain(Common),
    /// Variational PCD training (method pcd-pretrained or pcd-scratch).
    TrainPcd {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        resume: Resume,
    },
    /// Joint training with the inpainting criterion.
    TrainJdbm {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        resume: Resume,
    },
    /// Compute and cache classifier features from the trained DBM.
    ExtractFeatures(Common),
    /// Train the MLP head on cached features.
    TrainClassifier(Common),
    /// Report MLP and generative classification errors.
    Eval(Common),
    /// Check the exact oracle and mean field on random tiny models.
    OracleCheck {
        #[arg(long, default_value_t = 20)]
        models: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Full pipeline from a config.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        resume: Resume,
    },
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&common.config)
        .with_context(|| format!("stage config: cannot read {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    config.validate().map_err(|e| e.in_stage("config"))?;
    Ok(config)
}

fn control(common: &Common, resume: &Resume) -> RunControl {
    RunControl { resume: resume.resume, halt_after_epochs: resume.halt_after_epochs, reproducible: common.reproducible }
}

fn stage<T>(name: &str, r: jdbm::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| anyhow::Error::new(e.in_stage(name)))
}

fn generative(common: &Common, resume: &Resume, name: &str, jdbm: bool) -> anyhow::Result<()> {
    let config = load_config(common)?;
    if (config.method == Method::Jdbm) != jdbm {
        return Err(DbmError::Config(format!("{name} does not apply to method {:?}", config.method)).in_stage(name).into());
    }
    let data = stage("load-data", load_dataset(&config))?;
    let mut metrics = stage(name, MetricsLog::open(&config.out_dir, common.reproducible))?;
    match stage(name, train_generative(&config, &data, &mut metrics, control(common, resume)))? {
        GenerativeOutcome::Halted { epoch } => println!("halted after {epoch} epochs"),
        GenerativeOutcome::Finished { epochs, .. } => println!("trained for {epochs} epochs"),
    }
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain(common) => {
            let config = load_config(&common)?;
            let data = stage("load-data", load_dataset(&config))?;
            let mut metrics = stage("pretrain", MetricsLog::open(&config.out_dir, common.reproducible))?;
            stage("pretrain", pretrain(&config, &data, &mut metrics))?;
        }
        Command::TrainPcd { common, resume } => generative(&common, &resume, "train-pcd", false)?,
        Command::TrainJdbm { common, resume } => generative(&common, &resume, "train-jdbm", true)?,
        Command::ExtractFeatures(common) => {
            let config = load_config(&common)?;
            let data = stage("load-data", load_dataset(&config))?;
            stage("extract-features", extract_feature_cache(&config, &data))?;
        }
        Command::TrainClassifier(common) => {
            let config = load_config(&common)?;
            let data = stage("load-data", load_dataset(&config))?;
            let mut metrics = stage("train-classifier", MetricsLog::open(&config.out_dir, common.reproducible))?;
            stage("train-classifier", train_classifier_stage(&config, &data, &mut metrics))?;
        }
        Command::Eval(common) => {
            let config = load_config(&common)?;
            let data = stage("load-data", load_dataset(&config))?;
            let eval = stage("eval", evaluate_stage(&config, &data))?;
            let text = serde_json::to_string_pretty(&eval)?;
            std::fs::write(config.out_dir.join("evaluation.json"), format!("{text}\n"))
                .map_err(|e| DbmError::from(e).in_stage("eval"))?;
            println!("{text}");
        }
        Command::OracleCheck { models, seed } => {
            let report = stage("oracle-check", oracle_self_check(models, seed))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.passed {
                anyhow::bail!("stage oracle-check failed: tolerances exceeded");
            }
        }
        Command::Run { common, resume } => {
            let config = load_config(&common)?;
            let result = run_experiment(&config, control(&common, &resume))?;
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
