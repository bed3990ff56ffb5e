//! Pipeline stages. Each stage reads its inputs from the run directory and
//! persists its outputs there, so the CLI subcommands and the full pipeline
//! share one code path.

use log::{info, warn};
use serde::{Deserialize, Serialize};
use utilgen_core::analysis::{
    influence_scores, intra_class_diversity, weight_histogram, ConvexProbe, Histogram,
};
use utilgen_core::classifier::{train, ClassifierState};
use utilgen_core::data::{make_synthetic_task, LabeledDataset, SplitBundle};
use utilgen_core::diffusion::{
    initial_tokens, learn_class_token, train_denoiser, ClassToken, DenoiserState, NoiseSchedule,
};
use utilgen_core::ilpo::{generate_plain, optimize_prompts, synthesize, PromptState};
use utilgen_core::mlco::{build_preference_pairs, generate_dataset, implicit_reward_accuracy, run_mlco, score_samples};
use utilgen_core::todv::{predict_weights, run_todv, WeightNetParams};

use crate::config::{derived_seed, ExperimentConfig, Regime};
use crate::error::{Error, Result};
use crate::run::{RunDir, Table};

/// Synthetic data sources compared downstream.
pub const SOURCES: [&str; 2] = ["base", "utilgen"];

fn num(v: f64) -> String {
    format!("{v}")
}

#[derive(Serialize, Deserialize)]
struct TaskMeta {
    flipped: Vec<usize>,
    clean_labels: Vec<usize>,
}

fn bundle(run: &RunDir) -> Result<SplitBundle> {
    let meta: TaskMeta = run.load_checkpoint("task")?;
    Ok(SplitBundle {
        real_train: run.load_dataset("real_train")?,
        validation: run.load_dataset("validation")?,
        test: run.load_dataset("test")?,
        synthetic: None,
        flipped: meta.flipped,
        clean_labels: meta.clean_labels,
    })
}

fn membership_rows(table: &mut Table, cfg: &ExperimentConfig, source: &str, data: &LabeledDataset) {
    let spec = cfg.task.spec();
    for (c, row) in spec.mode_membership(data).iter().enumerate() {
        for (m, mass) in row.iter().enumerate() {
            table.push(vec![source.into(), c.to_string(), m.to_string(), num(*mass)]);
        }
    }
}

/// Draws the task splits.
pub fn make_task(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let b = make_synthetic_task(&cfg.task.spec(), cfg.task.sizes(), derived_seed(cfg.seed, "task"))?;
    run.save_dataset("real_train", &b.real_train)?;
    run.save_dataset("validation", &b.validation)?;
    run.save_dataset("test", &b.test)?;
    run.save_checkpoint("task", &TaskMeta { flipped: b.flipped.clone(), clean_labels: b.clean_labels.clone() })?;
    let mut t = Table::new(&["split", "class", "mode", "mass"]);
    membership_rows(&mut t, cfg, "real_train", &b.real_train);
    membership_rows(&mut t, cfg, "validation", &b.validation);
    membership_rows(&mut t, cfg, "test", &b.test);
    run.write_metrics("task_membership", &t)?;
    info!("task: {} train / {} validation / {} test, {} flipped", b.real_train.len(), b.validation.len(), b.test.len(), b.flipped.len());
    Ok(())
}

/// Trains the base generator and class tokens, then draws the warmup set.
pub fn warmup(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let real = run.load_dataset("real_train")?;
    let sched = cfg.schedule.build()?;
    let init = initial_tokens(&real, cfg.denoiser.cond_dim, derived_seed(cfg.seed, "token/projection"))?;
    let (base, log) = train_denoiser(&real, &init, &sched, &cfg.denoiser, &cfg.denoiser_train)?;
    let few_shot = real.few_shot(cfg.warmup.few_shot);
    let mut tokens = Vec::with_capacity(init.len());
    let mut token_table = Table::new(&["class", "step", "loss"]);
    for tok in &init {
        if cfg.token.steps == 0 {
            tokens.push(tok.clone());
            continue;
        }
        let (learned, losses) =
            learn_class_token(tok, &few_shot.restrict_to_class(tok.class), &base, &sched, &cfg.token)?;
        for (s, l) in losses.iter().enumerate() {
            token_table.push(vec![tok.class.to_string(), s.to_string(), num(*l)]);
        }
        tokens.push(learned);
    }
    let k = cfg.task.num_classes;
    let warm = generate_plain(
        &tokens,
        &vec![cfg.warmup.per_class; k],
        k,
        &base,
        &sched,
        cfg.warmup.guidance,
        cfg.warmup.sampling_steps,
        derived_seed(cfg.seed, "warmup"),
    )?;
    run.save_checkpoint("denoiser_base", &base)?;
    run.save_checkpoint("tokens", &tokens)?;
    run.save_dataset("few_shot", &few_shot)?;
    run.save_dataset("warmup", &warm)?;

    let mut t = Table::new(&["step", "loss"]);
    for (i, chunk) in log.step_losses.chunks(100).enumerate() {
        t.push(vec![(i * 100).to_string(), num(chunk.iter().sum::<f64>() / chunk.len() as f64)]);
    }
    run.write_metrics("denoiser_loss", &t)?;
    run.write_metrics("token_loss", &token_table)?;
    info!("warmup: base generator trained, {} warmup samples", warm.len());
    Ok(())
}

/// Loss grid on which the learned weight curve is reported.
pub fn weight_curve_grid() -> Vec<f64> {
    (0..=60).map(|i| i as f64 * 0.1).collect()
}

/// Task-oriented data valuation on real plus warmup data.
pub fn todv(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let b = bundle(run)?;
    let warm = run.load_dataset("warmup")?;
    let init = ClassifierState::new(
        cfg.classifier.arch,
        cfg.task.feature_dim,
        cfg.task.num_classes,
        derived_seed(cfg.seed, "classifier/todv"),
    );
    let (phi, cls, log) = if cfg.stages.todv {
        run_todv(&b, Some(&warm), &init, &cfg.todv)?
    } else {
        warn!("todv disabled: constant weight net, unweighted classifier");
        let (cls, _) = train(&init, &b.real_train.concat(&warm)?, &cfg.train)?;
        (WeightNetParams::zeros(cfg.todv.hidden), cls, Default::default())
    };
    run.save_checkpoint("weight_net", &phi)?;
    run.save_checkpoint("classifier_todv", &cls)?;

    let mut t = Table::new(&["epoch", "iteration", "train_accuracy", "val_accuracy", "val_loss", "mean_weight"]);
    for e in &log.epochs {
        t.push(vec![
            e.epoch.to_string(),
            e.iteration.to_string(),
            num(e.train_accuracy),
            num(e.val_accuracy),
            num(e.val_loss),
            num(e.mean_weight),
        ]);
    }
    run.write_metrics("todv", &t)?;
    let grid = weight_curve_grid();
    let mut c = Table::new(&["loss", "weight"]);
    for (l, w) in grid.iter().zip(predict_weights(&phi, &grid)?) {
        c.push(vec![num(*l), num(w)]);
    }
    run.write_metrics("weight_curve", &c)?;
    if !b.flipped.is_empty() {
        let losses = cls.per_sample_loss(&b.real_train.samples)?;
        let w = predict_weights(&phi, &losses)?;
        let mask = b.is_flipped_mask();
        let mean = |flag: bool| {
            let v: Vec<f64> = w.iter().zip(&mask).filter(|(_, m)| **m == flag).map(|(w, _)| *w).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        let mut n = Table::new(&["group", "mean_weight"]);
        n.push(vec!["flipped".into(), num(mean(true))]);
        n.push(vec!["clean".into(), num(mean(false))]);
        run.write_metrics("noise_weights", &n)?;
    }
    info!("todv: val accuracy {:.3}", cls.evaluate(&b.validation)?);
    Ok(())
}

/// Model-level DPO fine-tuning of the generator.
pub fn mlco(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let base: DenoiserState = run.load_checkpoint("denoiser_base")?;
    let tokens: Vec<ClassToken> = run.load_checkpoint("tokens")?;
    let phi: WeightNetParams = run.load_checkpoint("weight_net")?;
    let cls: ClassifierState = run.load_checkpoint("classifier_todv")?;
    let sched = cfg.schedule.build()?;
    let mut t = Table::new(&["iteration", "mean_score", "pairs", "mean_loss", "steps"]);
    let tuned = if cfg.stages.mlco {
        let (tuned, log) = run_mlco(&base, &tokens, &phi, &cls, &cfg.mlco, &sched)?;
        for it in &log.iterations {
            t.push(vec![
                it.iteration.to_string(),
                num(it.mean_score),
                it.pairs.to_string(),
                num(it.mean_loss),
                it.steps.to_string(),
            ]);
        }
        let held = held_out_pairs(&base, &tokens, &phi, &cls, cfg, &sched)?;
        let acc = implicit_reward_accuracy(&held, &tuned, &base.net, &tokens, &sched, 16, derived_seed(cfg.seed, "mlco/implicit"))?;
        let mut r = Table::new(&["metric", "value"]);
        r.push(vec!["held_out_pairs".into(), held.len().to_string()]);
        r.push(vec!["implicit_reward_accuracy".into(), num(acc)]);
        run.write_metrics("mlco_reward", &r)?;
        tuned
    } else {
        base.clone()
    };
    run.write_metrics("mlco", &t)?;
    run.save_checkpoint("denoiser_tuned", &tuned)?;
    Ok(())
}

/// Preference pairs from a fresh base-generator batch drawn on a stream the
/// fine-tuning never saw.
pub fn held_out_pairs(
    base: &DenoiserState,
    tokens: &[ClassToken],
    phi: &WeightNetParams,
    cls: &ClassifierState,
    cfg: &ExperimentConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<utilgen_core::mlco::PreferencePair>> {
    let m = &cfg.mlco;
    let batch = generate_dataset(
        base,
        tokens,
        cfg.task.num_classes,
        m.batch_size,
        m.guidance,
        m.sampling_steps,
        sched,
        derived_seed(cfg.seed, "mlco/held-out"),
    )?;
    let scores = score_samples(phi, cls, &batch)?;
    Ok(build_preference_pairs(&batch, &scores, m.rho, Some(m.pair_cap), derived_seed(cfg.seed, "mlco/held-out-pairs"))?.pairs)
}

/// TODV rerun with the warmup set replaced by a batch from the fine-tuned
/// generator, so the scorer sees the distribution it will be asked to rank.
fn retrain_weight_net(
    run: &RunDir,
    cfg: &ExperimentConfig,
    tuned: &DenoiserState,
    tokens: &[ClassToken],
    sched: &NoiseSchedule,
) -> Result<(WeightNetParams, ClassifierState)> {
    let b = bundle(run)?;
    let fresh = generate_dataset(
        tuned,
        tokens,
        cfg.task.num_classes,
        cfg.warmup.per_class,
        cfg.warmup.guidance,
        cfg.warmup.sampling_steps,
        sched,
        derived_seed(cfg.seed, "todv/retrain-batch"),
    )?;
    let init = ClassifierState::new(
        cfg.classifier.arch,
        cfg.task.feature_dim,
        cfg.task.num_classes,
        derived_seed(cfg.seed, "classifier/todv-retrain"),
    );
    let (phi, cls, _) = run_todv(&b, Some(&fresh), &init, &cfg.todv)?;
    run.save_checkpoint("weight_net_retrained", &phi)?;
    info!("weight net retrained on {} fine-tuned samples", fresh.len());
    Ok((phi, cls))
}

/// Instance-level prompt optimisation.
pub fn ilpo(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let prompts: Option<Vec<PromptState>> = if cfg.stages.ilpo {
        let tuned: DenoiserState = run.load_checkpoint("denoiser_tuned")?;
        let tokens: Vec<ClassToken> = run.load_checkpoint("tokens")?;
        let sched = cfg.schedule.build()?;
        let (phi, cls): (WeightNetParams, ClassifierState) = if cfg.stages.retrain_weight_net {
            retrain_weight_net(run, cfg, &tuned, &tokens, &sched)?
        } else {
            (run.load_checkpoint("weight_net")?, run.load_checkpoint("classifier_todv")?)
        };
        let few_shot = run.load_dataset("few_shot")?;
        let log = optimize_prompts(&tokens, &few_shot, &tuned, &phi, &cls, &sched, &cfg.ilpo)?;
        let mut t = Table::new(&["class", "epoch", "objective"]);
        for (p, traj) in log.prompts.iter().zip(&log.trajectories) {
            for (e, v) in traj.iter().enumerate() {
                t.push(vec![p.class.to_string(), e.to_string(), num(*v)]);
            }
        }
        run.write_metrics("ilpo", &t)?;
        Some(log.prompts)
    } else {
        run.write_metrics("ilpo", &Table::new(&["class", "epoch", "objective"]))?;
        None
    };
    run.save_checkpoint("prompts", &prompts)
}

/// Final synthesis from the base generator and from the optimised pipeline,
/// both on the same per-sample noise.
pub fn generate(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let base: DenoiserState = run.load_checkpoint("denoiser_base")?;
    let tuned: DenoiserState = run.load_checkpoint("denoiser_tuned")?;
    let tokens: Vec<ClassToken> = run.load_checkpoint("tokens")?;
    let prompts: Option<Vec<PromptState>> = run.load_checkpoint("prompts")?;
    let sched = cfg.schedule.build()?;
    let k = cfg.task.num_classes;
    let counts = cfg.counts(cfg.synthesis.budget);
    let ic = &cfg.ilpo;
    let plain = generate_plain(&tokens, &counts, k, &base, &sched, ic.guidance, ic.sampling_steps, ic.seed)?;
    let util = match &prompts {
        Some(p) => synthesize(p, &counts, k, &tuned, &sched, ic)?,
        None => generate_plain(&tokens, &counts, k, &tuned, &sched, ic.guidance, ic.sampling_steps, ic.seed)?,
    };
    run.save_dataset("synthetic_base", &plain)?;
    run.save_dataset("synthetic_utilgen", &util)?;
    info!("generate: {} samples per source", util.len());
    Ok(())
}

fn downstream_name(regime: &str, source: &str) -> String {
    format!("downstream_{regime}_{source}")
}

/// Training set of a regime and synthetic source; `None` when empty.
fn regime_data(regime: Regime, real: &LabeledDataset, synthetic: &LabeledDataset) -> Result<Option<LabeledDataset>> {
    Ok(match regime {
        Regime::SyntheticOnly if synthetic.is_empty() => None,
        Regime::SyntheticOnly => Some(synthetic.clone()),
        Regime::Joint => Some(real.concat(synthetic)?),
    })
}

/// Initial downstream classifier shared by every regime and source.
pub fn downstream_init(cfg: &ExperimentConfig, arch: utilgen_core::classifier::Architecture) -> ClassifierState {
    ClassifierState::new(arch, cfg.task.feature_dim, cfg.task.num_classes, derived_seed(cfg.seed, "classifier/downstream"))
}

/// Downstream classifier training per regime and source, plus a real-only
/// reference.
pub fn train_downstream(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let real = run.load_dataset("real_train")?;
    let init = downstream_init(cfg, cfg.classifier.arch);
    let (c, _) = train(&init, &real, &cfg.train)?;
    run.save_checkpoint(&downstream_name("real-only", "real"), &c)?;
    for &regime in &cfg.synthesis.regimes {
        for source in SOURCES {
            let syn = run.load_dataset(&format!("synthetic_{source}"))?;
            match regime_data(regime, &real, &syn)? {
                Some(data) => {
                    let (c, _) = train(&init, &data, &cfg.train)?;
                    run.save_checkpoint(&downstream_name(regime.as_str(), source), &c)?;
                }
                None => warn!("{regime} / {source}: no synthetic data at budget {}, skipped", cfg.synthesis.budget),
            }
        }
    }
    Ok(())
}

/// Test accuracy of every trained downstream classifier.
pub fn evaluate(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let test = run.load_dataset("test")?;
    let mut t = Table::new(&["regime", "source", "budget", "accuracy"]);
    let mut entries = vec![("real-only".to_string(), "real")];
    for &regime in &cfg.synthesis.regimes {
        for source in SOURCES {
            entries.push((regime.as_str().to_string(), source));
        }
    }
    for (regime, source) in entries {
        let name = downstream_name(&regime, source);
        if !run.exists(&format!("checkpoints/{name}.json")) {
            continue;
        }
        let c: ClassifierState = run.load_checkpoint(&name)?;
        t.push(vec![regime, source.into(), num(cfg.synthesis.budget), num(c.evaluate(&test)?)]);
    }
    run.write_metrics("accuracy", &t)?;
    Ok(())
}

fn strided(data: &LabeledDataset, max: usize) -> LabeledDataset {
    if data.len() <= max {
        return data.clone();
    }
    let idx: Vec<usize> = (0..max).map(|i| i * data.len() / max).collect();
    data.subset(&idx)
}

fn histogram_rows(t: &mut Table, source: &str, h: &Histogram) {
    let width = (h.hi - h.lo) / h.counts.len() as f64;
    for (i, c) in h.counts.iter().enumerate() {
        t.push(vec![
            source.into(),
            num(h.lo + i as f64 * width),
            num(h.lo + (i + 1) as f64 * width),
            c.to_string(),
        ]);
    }
}

/// Mode membership, utility-weight distributions, influence and diversity of
/// the real and synthetic sets.
pub fn analyze(run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    let real = run.load_dataset("real_train")?;
    let test = run.load_dataset("test")?;
    let phi: WeightNetParams = run.load_checkpoint("weight_net")?;
    let cls: ClassifierState = run.load_checkpoint("classifier_todv")?;
    let mut sets = vec![("real".to_string(), real)];
    for source in SOURCES {
        sets.push((source.to_string(), run.load_dataset(&format!("synthetic_{source}"))?));
    }
    let sets: Vec<(String, LabeledDataset)> = sets.into_iter().filter(|(_, d)| !d.is_empty()).collect();

    let spec = cfg.task.spec();
    let pref = cfg.task.preferred_mode();
    let mut membership = Table::new(&["source", "class", "mode", "mass"]);
    let mut pref_mass = Table::new(&["source", "preferred_mode", "mass"]);
    for (name, d) in &sets {
        membership_rows(&mut membership, cfg, name, d);
        pref_mass.push(vec![name.clone(), pref.to_string(), num(spec.mean_mode_mass(d, pref))]);
    }
    run.write_metrics("membership", &membership)?;
    run.write_metrics("preferred_mass", &pref_mass)?;

    let refs: Vec<&LabeledDataset> = sets.iter().map(|(_, d)| d).collect();
    let dists = weight_histogram(&phi, &cls, &refs)?;
    let mut w = Table::new(&["source", "n", "mean", "std", "min", "median", "max"]);
    let mut wh = Table::new(&["source", "lo", "hi", "count"]);
    for ((name, d), dist) in sets.iter().zip(&dists) {
        w.push(vec![
            name.clone(),
            d.len().to_string(),
            num(dist.mean),
            num(dist.std),
            num(dist.min),
            num(dist.median),
            num(dist.max),
        ]);
        histogram_rows(&mut wh, name, &dist.histogram);
    }
    run.write_metrics("weights", &w)?;
    run.write_metrics("weight_hist", &wh)?;

    let probe = ConvexProbe::new(cfg.analysis.probe_lambda, Some(cls.clone()));
    let mut inf = Table::new(&["source", "n", "positive_fraction", "mean_score"]);
    let mut ih = Table::new(&["source", "lo", "hi", "count"]);
    let mut div = Table::new(&["source", "class", "diversity"]);
    for (name, d) in &sets {
        let sub = strided(d, cfg.analysis.influence_samples);
        let rep = influence_scores(&sub, &test, &probe)?;
        inf.push(vec![
            name.clone(),
            sub.len().to_string(),
            num(rep.positive_fraction),
            num(rep.scores.iter().sum::<f64>() / rep.scores.len() as f64),
        ]);
        histogram_rows(&mut ih, name, &rep.histogram);
        let dv = intra_class_diversity(d, &cls);
        for (c, v) in dv.per_class.iter().enumerate() {
            if let Some(v) = v {
                div.push(vec![name.clone(), c.to_string(), num(*v)]);
            }
        }
        div.push(vec![name.clone(), "mean".into(), num(dv.mean)]);
    }
    run.write_metrics("influence", &inf)?;
    run.write_metrics("influence_hist", &ih)?;
    run.write_metrics("diversity", &div)?;
    Ok(())
}

/// Stage names in execution order.
pub const STAGES: [&str; 9] = ["make-task", "warmup", "todv", "mlco", "ilpo", "generate", "train", "eval", "analyze"];

pub fn run_stage(name: &str, run: &RunDir, cfg: &ExperimentConfig) -> Result<()> {
    match name {
        "make-task" => make_task(run, cfg),
        "warmup" => warmup(run, cfg),
        "todv" => todv(run, cfg),
        "mlco" => mlco(run, cfg),
        "ilpo" => ilpo(run, cfg),
        "generate" => generate(run, cfg),
        "train" => train_downstream(run, cfg),
        "eval" => evaluate(run, cfg),
        "analyze" => analyze(run, cfg),
        other => Err(Error::Config(format!("unknown stage '{other}'"))),
    }
}
