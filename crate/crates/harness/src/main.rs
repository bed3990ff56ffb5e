use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use utilgen_harness::config::ExperimentConfig;
use utilgen_harness::error::{Error, Result};
use utilgen_harness::{emit_report, reusability_experiment, run_pipeline, scaling_experiment, stages, RunDir};

#[derive(Parser)]
#[command(name = "utilgen", version, about = "Utility-guided synthetic data experiments")]
struct Cli {
    /// TOML config; defaults apply to every key it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory, overriding the config's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the task splits.
    MakeTask,
    /// Train the base denoiser and class tokens, then draw warmup data.
    Warmup,
    /// Learn the weight net and classifier.
    Todv,
    /// Preference fine-tune the denoiser.
    Mlco,
    /// Optimise class prompts.
    Ilpo,
    /// Generate the synthetic datasets.
    Generate,
    /// Train downstream classifiers.
    Train,
    /// Evaluate downstream classifiers.
    Eval,
    /// Weight, influence and diversity analysis.
    Analyze,
    /// Render figures and the markdown report from existing metrics.
    Report,
    /// Every stage followed by the report.
    Pipeline {
        /// Also run the budget scaling sweep.
        #[arg(long)]
        scaling: bool,
        /// Also run the architecture reuse experiment.
        #[arg(long)]
        reusability: bool,
    },
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, Option<String>)> {
    let text = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|source| Error::Io { path: p.clone(), source })?),
        None => None,
    };
    let mut cfg = ExperimentConfig::parse(text.as_deref().unwrap_or(""), cli.seed)?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if cfg.out.as_os_str().is_empty() {
        cfg.out = PathBuf::from(format!("runs/seed-{}", cfg.seed));
    }
    Ok((cfg, text))
}

fn execute(cli: &Cli) -> Result<()> {
    let (cfg, text) = load_config(cli)?;
    let stage = match &cli.command {
        Command::MakeTask => "make-task",
        Command::Warmup => "warmup",
        Command::Todv => "todv",
        Command::Mlco => "mlco",
        Command::Ilpo => "ilpo",
        Command::Generate => "generate",
        Command::Train => "train",
        Command::Eval => "eval",
        Command::Analyze => "analyze",
        Command::Report => return emit_report(&cfg.out),
        Command::Pipeline { scaling, reusability } => {
            run_pipeline(&cfg, text.as_deref())?;
            if *scaling {
                scaling_experiment(&cfg, &cfg.synthesis.scaling_budgets)?;
            }
            if *reusability {
                reusability_experiment(&cfg)?;
            }
            if *scaling || *reusability {
                emit_report(&cfg.out)?;
            }
            println!("{}", cfg.out.join("report/report.md").display());
            return Ok(());
        }
    };
    let run = RunDir::open(&cfg.out, &cfg, text.as_deref())?;
    stages::run_stage(stage, &run, &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
