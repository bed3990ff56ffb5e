mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::{read, tiny, tiny_with};
use utilgen_core::classifier::train;
use utilgen_harness::error::Error;
use utilgen_harness::stages::{self, downstream_init, STAGES};
use utilgen_harness::{emit_report, reusability_experiment, run_pipeline, scaling_experiment, RunDir};

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn identical_config_and_seed_give_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_pipeline(&tiny(&a), None).unwrap();
    run_pipeline(&tiny(&b), None).unwrap();
    let names = files(&a.join("metrics"));
    assert_eq!(names, files(&b.join("metrics")));
    assert!(names.contains(&"accuracy.csv".to_string()));
    for n in &names {
        assert_eq!(read(&a.join("metrics").join(n)), read(&b.join("metrics").join(n)), "{n}");
    }
    for d in ["synthetic_base.txt", "synthetic_utilgen.txt"] {
        assert_eq!(read(&a.join("datasets").join(d)), read(&b.join("datasets").join(d)));
    }
    assert_eq!(read(&a.join("config.sha256")), read(&b.join("config.sha256")));
}

#[test]
fn disabling_every_optimisation_stage_reproduces_the_base_generator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_with(dir.path(), "stages.todv = false\nstages.mlco = false\nstages.ilpo = false");
    let run = run_pipeline(&cfg, None).unwrap();
    assert_eq!(read(&run.path("datasets/synthetic_base.txt")), read(&run.path("datasets/synthetic_utilgen.txt")));
    let acc = run.read_metrics("accuracy").unwrap();
    for regime in ["joint", "synthetic-only"] {
        let get = |s| acc.lookup(&[("regime", regime), ("source", s)], "accuracy").unwrap().to_string();
        assert_eq!(get("base"), get("utilgen"));
    }
}

#[test]
fn zero_budget_joint_training_equals_real_only_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.synthesis.budget = 0.0;
    let run = run_pipeline(&cfg, None).unwrap();
    let acc = run.read_metrics("accuracy").unwrap();
    let real = acc.lookup_f64(&[("regime", "real-only")], "accuracy").unwrap();
    for s in ["base", "utilgen"] {
        assert_eq!(acc.lookup_f64(&[("regime", "joint"), ("source", s)], "accuracy"), Some(real));
        assert_eq!(acc.lookup(&[("regime", "synthetic-only"), ("source", s)], "accuracy"), None);
    }
    let direct = train(&downstream_init(&cfg, cfg.classifier.arch), &run.load_dataset("real_train").unwrap(), &cfg.train)
        .unwrap()
        .0;
    assert_eq!(direct.evaluate(&run.load_dataset("test").unwrap()).unwrap(), real);
}

#[test]
fn scaling_rows_match_standalone_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&dir.path().join("main"));
    let table = scaling_experiment(&cfg, &[0.25, 0.5]).unwrap();
    assert_eq!(table.rows.len(), 2 * cfg.synthesis.regimes.len() * 2);
    assert_eq!(RunDir::existing(&cfg.out).unwrap().read_metrics("scaling").unwrap(), table);

    let mut alone = tiny(&dir.path().join("alone"));
    alone.synthesis.budget = 0.25;
    let acc = run_pipeline(&alone, None).unwrap().read_metrics("accuracy").unwrap();
    for row in table.rows.iter().filter(|r| r[0] == "0.25") {
        assert_eq!(acc.lookup(&[("regime", &row[1]), ("source", &row[2])], "accuracy"), Some(row[3].as_str()), "{row:?}");
    }

    assert!(scaling_experiment(&cfg, &[]).unwrap().rows.is_empty());
}

#[test]
fn report_is_idempotent_and_links_resolve() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_pipeline(&tiny(dir.path()), None).unwrap();
    let snapshot = |sub: &str| -> Vec<(String, String)> {
        files(&run.path(sub)).into_iter().map(|n| (n.clone(), read(&run.path(&format!("{sub}/{n}"))))).collect()
    };
    let (plots, report) = (snapshot("plots"), snapshot("report"));
    emit_report(run.root()).unwrap();
    assert_eq!(snapshot("plots"), plots);
    assert_eq!(snapshot("report"), report);

    let md = read(&run.path("report/report.md"));
    let links: Vec<&str> = md.split("](").skip(1).map(|s| &s[..s.find(')').unwrap()]).collect();
    assert!(!links.is_empty());
    for l in links {
        assert!(run.path("report").join(l).exists(), "dangling link {l}");
    }
}

#[test]
fn report_on_empty_directory_lists_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    match emit_report(dir.path()) {
        Err(Error::MissingArtifacts(m)) => {
            assert_eq!(m.len(), 9);
            assert!(m.contains(&"metrics/accuracy.csv".to_string()));
        }
        other => panic!("expected missing artifacts, got {other:?}"),
    }
}

#[test]
fn stage_without_inputs_fails_and_keeps_earlier_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let run = RunDir::open(dir.path(), &cfg, None).unwrap();
    stages::run_stage("make-task", &run, &cfg).unwrap();
    let err = stages::run_stage("ilpo", &run, &cfg).unwrap_err();
    assert!(matches!(err, Error::MissingArtifacts(_)), "{err}");
    assert!(run.exists("datasets/real_train.txt"));
    assert!(stages::run_stage("no-such-stage", &run, &cfg).is_err());
    assert_eq!(STAGES.len(), 9);
}

#[test]
fn reusability_with_identical_architectures_gives_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_with(dir.path(), "classifier.reuse_arch = \"mlp-small\"");
    let t = reusability_experiment(&cfg).unwrap();
    assert_eq!(t.rows.len(), 4);
    assert_eq!(t.rows[0][1..], t.rows[2][1..]);
    assert_eq!(t.rows[1][1..], t.rows[3][1..]);
}

#[test]
fn cli_exit_status() {
    let bin = env!("CARGO_BIN_EXE_utilgen");
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, common::TINY).unwrap();
    let out = dir.path().join("run");

    let ok = Command::new(bin).args(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "make-task"]).status().unwrap();
    assert!(ok.success());
    assert_eq!(read(&out.join("config.toml")), common::TINY);
    assert!(out.join("datasets/test.txt").exists());

    let missing = Command::new(bin).args(["--out", dir.path().join("empty").to_str().unwrap(), "report"]).status().unwrap();
    assert_eq!(missing.code(), Some(1));

    fs::write(&config, "todv.no_such_key = 1\n").unwrap();
    let bad = Command::new(bin).args(["--config", config.to_str().unwrap(), "make-task"]).status().unwrap();
    assert_eq!(bad.code(), Some(1));

    let other_seed = Command::new(bin).args(["--seed", "99", "--out", out.to_str().unwrap(), "make-task"]).status().unwrap();
    assert_eq!(other_seed.code(), Some(1), "a run directory is tied to one config");
}

#[test]
fn retraining_the_weight_net_after_fine_tuning_is_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let plain = run_pipeline(&tiny(&dir.path().join("plain")), None).unwrap();
    assert!(!plain.exists("checkpoints/weight_net_retrained.json"));
    let cfg = tiny_with(&dir.path().join("retrain"), "stages.retrain_weight_net = true");
    let run = run_pipeline(&cfg, None).unwrap();
    assert!(run.exists("checkpoints/weight_net_retrained.json"));
    assert_ne!(read(&run.path("metrics/ilpo.csv")), read(&plain.path("metrics/ilpo.csv")));
}
