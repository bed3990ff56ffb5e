//! The end-to-end pipeline and the experiment sweeps built on it.

use std::path::{Path, PathBuf};

use log::{info, warn};
use utilgen_core::classifier::{train, ClassifierState};

use crate::config::{ExperimentConfig, Regime};
use crate::error::Result;
use crate::report::emit_report;
use crate::run::{RunDir, Table};
use crate::stages::{self, downstream_init, SOURCES, STAGES};

/// Stages whose outputs do not depend on the synthesis budget.
const UPSTREAM: [&str; 5] = ["make-task", "warmup", "todv", "mlco", "ilpo"];
const DOWNSTREAM: [&str; 4] = ["generate", "train", "eval", "analyze"];
const UPSTREAM_DATASETS: [&str; 5] = ["real_train", "validation", "test", "few_shot", "warmup"];
const UPSTREAM_CHECKPOINTS: [&str; 7] =
    ["task", "denoiser_base", "tokens", "weight_net", "classifier_todv", "denoiser_tuned", "prompts"];

/// Runs every stage into `config.out` and renders the report. A failing
/// stage stops the run; artifacts written so far stay on disk.
pub fn run_pipeline(config: &ExperimentConfig, source_text: Option<&str>) -> Result<RunDir> {
    let run = RunDir::open(&config.out, config, source_text)?;
    for stage in STAGES {
        info!("stage {stage}");
        stages::run_stage(stage, &run, config)?;
    }
    emit_report(run.root())?;
    Ok(run)
}

fn upstream_done(run: &RunDir) -> bool {
    run.exists("checkpoints/prompts.json")
}

/// Copies budget-independent artifacts between runs, restamping checkpoints
/// with the destination's config hash.
fn import_upstream(from: &RunDir, to: &RunDir) -> Result<()> {
    for name in UPSTREAM_DATASETS {
        to.save_dataset(name, &from.load_dataset(name)?)?;
    }
    for name in UPSTREAM_CHECKPOINTS {
        to.save_checkpoint(name, &from.load_checkpoint::<serde_json::Value>(name)?)?;
    }
    Ok(())
}

fn budget_dir(root: &Path, budget: f64) -> PathBuf {
    root.join("scaling").join(format!("budget-{budget}"))
}

/// Accuracy against synthesis budget for every configured regime. The
/// budget-independent stages run once in `config.out`; each budget gets its
/// own run directory under `scaling/`. Results are identical to separate
/// full pipeline runs because per-sample noise is prefix-consistent and the
/// upstream stages never see the budget.
pub fn scaling_experiment(config: &ExperimentConfig, budgets: &[f64]) -> Result<Table> {
    let mut table = Table::new(&["budget", "regime", "source", "accuracy"]);
    if budgets.is_empty() {
        return Ok(table);
    }
    let main = RunDir::open(&config.out, config, None)?;
    if !upstream_done(&main) {
        for stage in UPSTREAM {
            stages::run_stage(stage, &main, config)?;
        }
    }
    for &b in budgets {
        let mut cfg = config.clone();
        cfg.synthesis.budget = b;
        cfg.out = budget_dir(&config.out, b);
        let run = RunDir::open(&cfg.out, &cfg, None)?;
        import_upstream(&main, &run)?;
        for stage in DOWNSTREAM {
            stages::run_stage(stage, &run, &cfg)?;
        }
        let acc = run.read_metrics("accuracy")?;
        for regime in &cfg.synthesis.regimes {
            for source in SOURCES {
                if let Some(a) = acc.lookup(&[("regime", regime.as_str()), ("source", source)], "accuracy") {
                    table.push(vec![format!("{b}"), regime.to_string(), source.into(), a.into()]);
                }
            }
        }
        info!("scaling: budget {b} done");
    }
    main.write_metrics("scaling", &table)?;
    Ok(table)
}

/// Trains both configured architectures on data generated with
/// `classifier.arch` in the loop. Rows: architecture x data source, in the
/// first configured regime.
pub fn reusability_experiment(config: &ExperimentConfig) -> Result<Table> {
    let (a, b) = (config.classifier.arch, config.classifier.reuse_arch);
    if a == b {
        warn!("reusability: both architectures are {a}; the comparison is degenerate");
    }
    let run = RunDir::open(&config.out, config, None)?;
    if !run.exists("datasets/synthetic_utilgen.txt") {
        for stage in UPSTREAM.iter().chain(&["generate"]) {
            stages::run_stage(stage, &run, config)?;
        }
    }
    let real = run.load_dataset("real_train")?;
    let test = run.load_dataset("test")?;
    let regime = config.synthesis.regimes[0];
    let mut table = Table::new(&["arch", "regime", "source", "accuracy"]);
    for arch in [a, b] {
        let init = downstream_init(config, arch);
        for source in SOURCES {
            let syn = run.load_dataset(&format!("synthetic_{source}"))?;
            let data = match regime {
                Regime::SyntheticOnly => syn,
                Regime::Joint => real.concat(&syn)?,
            };
            if data.is_empty() {
                warn!("reusability: {source} has no data at budget {}", config.synthesis.budget);
                continue;
            }
            let (c, _): (ClassifierState, _) = train(&init, &data, &config.train)?;
            table.push(vec![arch.to_string(), regime.to_string(), source.into(), format!("{}", c.evaluate(&test)?)]);
        }
    }
    run.write_metrics("reusability", &table)?;
    Ok(table)
}
