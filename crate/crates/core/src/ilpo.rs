//! Instance-level generation policy optimisation.
//!
//! Per class, a condition embedding is optimised by gradient ascent on
//! `E_eps[ W(L(f(g(p, eps)), y)) + lambda cos(E(g(p, eps)), e) ]`, back-propagating
//! through a short DDIM chain. Each sample's initial noise is then refined by
//! denoising at a high guidance scale and inverting at a low one, which carries
//! the prompt's semantics into the noise.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierState;
use crate::data::{LabeledDataset, Provenance, Sample};
use crate::diffusion::{
    ddim_chain_vjp, ddim_invert_steps, ddim_sample_steps, ddim_sample_traced, ClassToken, DenoiserState, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::nn::{dot, norm, Adam};
use crate::rng;
use crate::todv::WeightNetParams;

/// `-cos(E(x), proto)`; zero-norm features give 0.
pub fn semantic_regularizer(x: &[f64], proto: &[f64], classifier: &ClassifierState) -> f64 {
    -cosine(&classifier.features(x), proto)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        warn!("cosine of a zero-norm vector treated as 0");
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// `d cos(f, e) / d f`.
fn cosine_grad(f: &[f64], e: &[f64]) -> Vec<f64> {
    let (nf, ne) = (norm(f), norm(e));
    if nf == 0.0 || ne == 0.0 {
        return vec![0.0; f.len()];
    }
    let c = dot(f, e) / (nf * ne);
    f.iter().zip(e).map(|(fi, ei)| ei / (nf * ne) - c * fi / (nf * nf)).collect()
}

/// Mean classifier feature of a set of real samples.
pub fn class_prototype(samples: &[Sample], classifier: &ClassifierState) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Config("prototype needs at least one sample".into()));
    }
    let mut p = vec![0.0; classifier.net.sizes[classifier.net.num_layers() - 1]];
    for s in samples {
        p.iter_mut().zip(classifier.features(&s.features)).for_each(|(a, b)| *a += b / samples.len() as f64);
    }
    if norm(&p) == 0.0 {
        return Err(Error::Degenerate("prototype has zero norm".into()));
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub class: usize,
    pub embedding: Vec<f64>,
    pub prototype: Vec<f64>,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlpoConfig {
    pub prompt_lr: f64,
    pub prompt_epochs: usize,
    /// Guidance of the denoising pass in noise refinement.
    pub omega_l: f64,
    /// Guidance of the inversion pass in noise refinement.
    pub omega_w: f64,
    /// DDIM steps differentiated through during prompt optimisation.
    pub chain_steps: usize,
    /// Noise draws per objective estimate.
    pub noise_draws: usize,
    pub lambda: f64,
    /// Denoise/invert round trips per sample (0 disables refinement).
    pub round_trips: usize,
    pub refine_steps: usize,
    /// Guidance and DDIM steps of the final synthesis.
    pub guidance: f64,
    pub sampling_steps: usize,
    pub seed: u64,
}

impl Default for IlpoConfig {
    fn default() -> Self {
        Self {
            prompt_lr: 1e-3,
            prompt_epochs: 400,
            omega_l: 5.5,
            omega_w: 0.0,
            chain_steps: 10,
            noise_draws: 8,
            lambda: 0.1,
            round_trips: 1,
            refine_steps: 50,
            guidance: 2.0,
            sampling_steps: 50,
            seed: 0,
        }
    }
}

impl IlpoConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.chain_steps == 0 || self.chain_steps > sched.steps() {
            return Err(Error::Config(format!("chain length {} must be in 1..={}", self.chain_steps, sched.steps())));
        }
        if self.round_trips > 0 && self.omega_l <= self.omega_w {
            return Err(Error::Config(format!(
                "semantic injection needs omega_l > omega_w (got {} <= {})",
                self.omega_l, self.omega_w
            )));
        }
        if self.lambda < 0.0 || self.prompt_lr <= 0.0 || self.noise_draws == 0 {
            return Err(Error::Config("lambda must be >= 0, lr and noise draws positive".into()));
        }
        Ok(())
    }
}

/// Differentiable scalar objective over an embedding.
pub trait PromptObjective {
    /// Value and gradient at `p`.
    fn evaluate(&mut self, p: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// The utility objective for one class with fixed noise draws.
pub struct UtilityObjective<'a> {
    pub class: usize,
    pub prototype: &'a [f64],
    pub lambda: f64,
    pub state: &'a DenoiserState,
    pub phi: &'a WeightNetParams,
    pub classifier: &'a ClassifierState,
    pub sched: &'a NoiseSchedule,
    pub noises: Vec<Vec<f64>>,
    pub guidance: f64,
    pub chain_steps: usize,
}

impl UtilityObjective<'_> {
    /// Objective and `dJ/dx` for one generated sample.
    fn sample_terms(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let (loss, dloss) = self.classifier.loss_input_grad(x, self.class);
        let w = self.phi.weight(loss);
        let dw = self.phi.weight_derivative(loss);
        let mut g: Vec<f64> = dloss.iter().map(|v| dw * v).collect();
        let mut value = w;
        if self.lambda != 0.0 {
            let (f, trace) = self.classifier.features_trace(x);
            value += self.lambda * cosine(&f, self.prototype);
            let gf: Vec<f64> = cosine_grad(&f, self.prototype).into_iter().map(|v| self.lambda * v).collect();
            g.iter_mut().zip(self.classifier.features_vjp(&trace, &gf)).for_each(|(a, b)| *a += b);
        }
        (value, g)
    }
}

impl PromptObjective for UtilityObjective<'_> {
    fn evaluate(&mut self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = self.noises.len() as f64;
        let mut value = 0.0;
        let mut grad = vec![0.0; p.len()];
        for eps in &self.noises {
            let (x, tape) = ddim_sample_traced(eps, p, self.guidance, self.sched, self.state, self.chain_steps)?;
            let (v, gx) = self.sample_terms(&x);
            value += v / n;
            let (_, gc) = ddim_chain_vjp(&tape, self.state, &gx);
            grad.iter_mut().zip(gc).for_each(|(a, b)| *a += b / n);
        }
        Ok((value, grad))
    }
}

const MAX_HALVINGS: usize = 5;

/// Adam ascent on `objective` from `p0`. A non-finite value or gradient
/// halves the step and retries; after five halvings the run aborts.
/// Returns the final point and the objective value at each epoch's start.
pub fn ascend(
    objective: &mut dyn PromptObjective,
    p0: &[f64],
    lr: f64,
    epochs: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut p = p0.to_vec();
    let mut opt = Adam::new(p.len());
    let mut lr = lr;
    let mut trajectory = Vec::with_capacity(epochs);
    let mut halvings = 0;
    // Point, optimiser state and ascent direction before the last step.
    let mut last: Option<(Vec<f64>, Adam, Vec<f64>)> = None;
    while trajectory.len() < epochs {
        let (v, g) = objective.evaluate(&p)?;
        if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
            halvings += 1;
            if halvings > MAX_HALVINGS {
                return Err(Error::Numerical(format!(
                    "non-finite prompt objective at epoch {} after {MAX_HALVINGS} step halvings",
                    trajectory.len()
                )));
            }
            lr /= 2.0;
            warn!("non-finite prompt gradient at epoch {}; retrying with step {lr}", trajectory.len());
            if let Some((prev_p, prev_opt, prev_dir)) = &last {
                p = prev_p.clone();
                opt = prev_opt.clone();
                opt.step(&mut p, prev_dir, lr);
            }
            continue;
        }
        trajectory.push(v);
        let dir: Vec<f64> = g.iter().map(|x| -x).collect();
        last = Some((p.clone(), opt.clone(), dir.clone()));
        opt.step(&mut p, &dir, lr);
    }
    Ok((p, trajectory))
}

/// Fixed noise draws used by a class's objective estimate.
pub fn objective_noises(seed: u64, class: usize, draws: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, &format!("ilpo/prompt-noise/{class}"));
    (0..draws).map(|_| rng::normal_vec(&mut r, dim)).collect()
}

/// Optimises one class's prompt. Returns the new state and the trajectory.
pub fn optimize_prompt(
    prompt: &PromptState,
    state: &DenoiserState,
    phi: &WeightNetParams,
    classifier: &ClassifierState,
    sched: &NoiseSchedule,
    config: &IlpoConfig,
) -> Result<(PromptState, Vec<f64>)> {
    config.validate(sched)?;
    let mut obj = UtilityObjective {
        class: prompt.class,
        prototype: &prompt.prototype,
        lambda: prompt.lambda,
        state,
        phi,
        classifier,
        sched,
        noises: objective_noises(config.seed, prompt.class, config.noise_draws, state.feature_dim),
        guidance: config.guidance,
        chain_steps: config.chain_steps,
    };
    let (p, traj) = ascend(&mut obj, &prompt.embedding, config.prompt_lr, config.prompt_epochs)?;
    Ok((PromptState { embedding: p, ..prompt.clone() }, traj))
}

/// One denoise pass at `omega_l` and one inversion pass at `omega_w`, without
/// the guidance-order check.
fn round_trip(
    eps: &[f64],
    cond: &[f64],
    omega_l: f64,
    omega_w: f64,
    steps: usize,
    sched: &NoiseSchedule,
    state: &DenoiserState,
) -> Result<Vec<f64>> {
    let x = ddim_sample_steps(eps, cond, omega_l, sched, state, steps)?;
    ddim_invert_steps(&x, cond, omega_w, sched, state, steps)
}

/// `invert_{omega_w}(sample_{omega_l}(eps, p))`, repeated `round_trips` times.
pub fn optimize_noise(
    eps: &[f64],
    prompt: &[f64],
    state: &DenoiserState,
    sched: &NoiseSchedule,
    config: &IlpoConfig,
) -> Result<Vec<f64>> {
    if config.omega_l <= config.omega_w {
        return Err(Error::Config(format!(
            "semantic injection needs omega_l > omega_w (got {} <= {})",
            config.omega_l, config.omega_w
        )));
    }
    let mut e = eps.to_vec();
    for _ in 0..config.round_trips {
        e = round_trip(&e, prompt, config.omega_l, config.omega_w, config.refine_steps, sched, state)?;
    }
    Ok(e)
}

/// Initial noise of sample `index` of `class`; independent of how many samples
/// are requested, so larger budgets extend smaller ones.
pub fn sample_noise(seed: u64, class: usize, index: usize, dim: usize) -> Vec<f64> {
    rng::normal_vec(&mut rng::stream(seed, &format!("synthesis/{class}/{index}")), dim)
}

/// Prototypes from the few-shot set and initial prompt states from the tokens.
pub fn initial_prompts(
    tokens: &[ClassToken],
    few_shot: &LabeledDataset,
    classifier: &ClassifierState,
    lambda: f64,
) -> Result<Vec<PromptState>> {
    tokens
        .iter()
        .map(|t| {
            let shots: Vec<Sample> =
                few_shot.samples.iter().filter(|s| s.label == t.class).cloned().collect();
            Ok(PromptState {
                class: t.class,
                embedding: t.embedding.clone(),
                prototype: class_prototype(&shots, classifier)?,
                lambda,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IlpoLog {
    pub prompts: Vec<PromptState>,
    pub trajectories: Vec<Vec<f64>>,
}

/// Optimises each class prompt, refines per-sample noise and synthesises
/// `counts[c]` samples of class `c`.
#[allow(clippy::too_many_arguments)]
pub fn generate_high_utility(
    tokens: &[ClassToken],
    counts: &[usize],
    few_shot: &LabeledDataset,
    state: &DenoiserState,
    phi: &WeightNetParams,
    classifier: &ClassifierState,
    sched: &NoiseSchedule,
    config: &IlpoConfig,
) -> Result<(LabeledDataset, IlpoLog)> {
    config.validate(sched)?;
    let wanted: Vec<ClassToken> = tokens
        .iter()
        .filter(|t| {
            let keep = counts.get(t.class).copied().unwrap_or(0) > 0;
            if !keep {
                warn!("class {}: no samples requested, skipped", t.class);
            }
            keep
        })
        .cloned()
        .collect();
    let log = optimize_prompts(&wanted, few_shot, state, phi, classifier, sched, config)?;
    let data = synthesize(&log.prompts, counts, classifier.num_classes(), state, sched, config)?;
    Ok((data, log))
}

/// Prompt optimisation for every token.
pub fn optimize_prompts(
    tokens: &[ClassToken],
    few_shot: &LabeledDataset,
    state: &DenoiserState,
    phi: &WeightNetParams,
    classifier: &ClassifierState,
    sched: &NoiseSchedule,
    config: &IlpoConfig,
) -> Result<IlpoLog> {
    config.validate(sched)?;
    let mut log = IlpoLog::default();
    for prompt in initial_prompts(tokens, few_shot, classifier, config.lambda)? {
        let (opt, traj) = optimize_prompt(&prompt, state, phi, classifier, sched, config)?;
        log.prompts.push(opt);
        log.trajectories.push(traj);
    }
    Ok(log)
}

/// Per-sample noise refinement and sampling from optimised prompts.
pub fn synthesize(
    prompts: &[PromptState],
    counts: &[usize],
    num_classes: usize,
    state: &DenoiserState,
    sched: &NoiseSchedule,
    config: &IlpoConfig,
) -> Result<LabeledDataset> {
    config.validate(sched)?;
    let mut samples = Vec::new();
    for p in prompts {
        for i in 0..counts.get(p.class).copied().unwrap_or(0) {
            let mut eps = sample_noise(config.seed, p.class, i, state.feature_dim);
            if config.round_trips > 0 {
                eps = optimize_noise(&eps, &p.embedding, state, sched, config)?;
            }
            let x = ddim_sample_steps(&eps, &p.embedding, config.guidance, sched, state, config.sampling_steps)?;
            samples.push(Sample::new(x, p.class));
        }
    }
    LabeledDataset::new(samples, num_classes, state.feature_dim, Provenance::Synthetic)
}

/// Plain synthesis from the class tokens and raw noise, using the same
/// per-sample noise as [`generate_high_utility`].
pub fn generate_plain(
    tokens: &[ClassToken],
    counts: &[usize],
    num_classes: usize,
    state: &DenoiserState,
    sched: &NoiseSchedule,
    guidance: f64,
    sampling_steps: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let mut samples = Vec::new();
    for t in tokens {
        for i in 0..counts.get(t.class).copied().unwrap_or(0) {
            let eps = sample_noise(seed, t.class, i, state.feature_dim);
            samples.push(Sample::new(ddim_sample_steps(&eps, &t.embedding, guidance, sched, state, sampling_steps)?, t.class));
        }
    }
    LabeledDataset::new(samples, num_classes, state.feature_dim, Provenance::Synthetic)
}

/// Mean prototype alignment `cos(E(x), e)` of a set of samples.
pub fn mean_alignment(samples: &[Vec<f64>], proto: &[f64], classifier: &ClassifierState) -> f64 {
    samples.iter().map(|x| cosine(&classifier.features(x), proto)).sum::<f64>() / samples.len().max(1) as f64
}

#[doc(hidden)]
pub fn round_trip_unchecked(
    eps: &[f64],
    cond: &[f64],
    omega_l: f64,
    omega_w: f64,
    steps: usize,
    sched: &NoiseSchedule,
    state: &DenoiserState,
) -> Result<Vec<f64>> {
    round_trip(eps, cond, omega_l, omega_w, steps, sched, state)
}
