//! Model-level generation optimisation: utility scoring of generated samples,
//! preference-pair construction and diffusion DPO against a frozen reference.

use log::warn;
use rand::seq::{index::sample as sample_indices, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierState;
use crate::data::{LabeledDataset, Provenance, Sample};
use crate::diffusion::{ddim_sample_steps, forward_noising, ClassToken, DenoiserState, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softplus, Adam, Mlp};
use crate::rng;
use crate::todv::{predict_weights, WeightNetParams};

/// `W_phi(L(f(x), y))` for every sample.
pub fn score_samples(phi: &WeightNetParams, classifier: &ClassifierState, batch: &LabeledDataset) -> Result<Vec<f64>> {
    if batch.num_classes != classifier.num_classes() || batch.feature_dim != classifier.feature_dim() {
        return Err(Error::Validation(format!(
            "dataset (K={}, D={}) does not match classifier (K={}, D={})",
            batch.num_classes,
            batch.feature_dim,
            classifier.num_classes(),
            classifier.feature_dim()
        )));
    }
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    predict_weights(phi, &classifier.per_sample_loss(&batch.samples)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub class: usize,
    pub winner: Sample,
    pub loser: Sample,
    pub winner_score: f64,
    pub loser_score: f64,
}

impl PreferencePair {
    /// Scores tie, so the preference carries no utility signal.
    pub fn is_degenerate(&self) -> bool {
        self.winner_score <= self.loser_score
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<PreferencePair>,
    /// Classes whose scored batch was entirely tied.
    pub degenerate_classes: Vec<usize>,
}

/// Per class: stable sort by score (descending), top `ceil(rho n)` become
/// winners and bottom `ceil(rho n)` losers; the winner x loser cross product
/// is uniformly subsampled to `cap` when given.
pub fn build_preference_pairs(
    scored: &LabeledDataset,
    scores: &[f64],
    rho: f64,
    cap: Option<usize>,
    seed: u64,
) -> Result<PairSet> {
    if scores.len() != scored.len() {
        return Err(Error::Validation("one score per sample required".into()));
    }
    if !(rho > 0.0 && rho <= 0.5) {
        return Err(Error::Config(format!("selection ratio {rho} outside (0, 0.5]")));
    }
    let mut out = PairSet::default();
    let mut r = rng::stream(seed, "mlco/pairs");
    for class in 0..scored.num_classes {
        let mut idx = scored.class_indices(class);
        let n = idx.len();
        let k = ((rho * n as f64).ceil() as usize).min(n / 2);
        if k == 0 {
            continue;
        }
        // Vec::sort_by is stable, so ties keep their original index order.
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        if scores[idx[0]] == scores[idx[n - 1]] {
            warn!("class {class}: all {n} scores tied, pairs follow index order");
            out.degenerate_classes.push(class);
        }
        let winners = &idx[..k];
        let losers = &idx[n - k..];
        let mut cross: Vec<(usize, usize)> =
            winners.iter().flat_map(|&w| losers.iter().map(move |&l| (w, l))).collect();
        if let Some(cap) = cap {
            if cross.len() > cap {
                let mut keep = sample_indices(&mut r, cross.len(), cap).into_vec();
                keep.sort_unstable();
                cross = keep.into_iter().map(|i| cross[i]).collect();
            }
        }
        out.pairs.extend(cross.into_iter().map(|(w, l)| PreferencePair {
            class,
            winner: scored.samples[w].clone(),
            loser: scored.samples[l].clone(),
            winner_score: scores[w],
            loser_score: scores[l],
        }));
    }
    Ok(out)
}

/// Definition of the log signal-to-noise quantity passed to the weighting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SnrConvention {
    /// `alpha_bar / (1 - alpha_bar)`.
    Ratio,
    /// `ln(alpha_bar / (1 - alpha_bar))`.
    LogRatio,
}

pub fn lambda(sched: &NoiseSchedule, t: usize, convention: SnrConvention) -> f64 {
    match convention {
        SnrConvention::Ratio => sched.snr(t),
        SnrConvention::LogRatio => sched.snr(t).ln(),
    }
}

/// Constant weighting `omega(lambda) = 1` of the simplified objective.
pub fn timestep_weight(_lambda: f64) -> f64 {
    1.0
}

fn sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Noise draws and timestep for one pair evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PairNoise {
    pub t: usize,
    pub eps_w: Vec<f64>,
    pub eps_l: Vec<f64>,
}

impl PairNoise {
    pub fn draw(r: &mut rng::Rng, sched: &NoiseSchedule, dim: usize) -> Self {
        let t = r.random_range(1..=sched.steps());
        Self { t, eps_w: rng::normal_vec(r, dim), eps_l: rng::normal_vec(r, dim) }
    }
}

/// `Delta L = ||eps - eps_psi(x_t)||^2 - ||eps - eps_ref(x_t)||^2` for winner
/// and loser.
pub fn reconstruction_deltas(
    pair: &PreferencePair,
    noise: &PairNoise,
    cond: &[f64],
    trainable: &Mlp,
    state: &DenoiserState,
    sched: &NoiseSchedule,
) -> Result<(f64, f64)> {
    let xw = forward_noising(&pair.winner.features, noise.t, &noise.eps_w, sched)?;
    let xl = forward_noising(&pair.loser.features, noise.t, &noise.eps_l, sched)?;
    let dw = sq_err(&noise.eps_w, &state.epsilon_with_params(&trainable.params, &xw, noise.t, cond))
        - sq_err(&noise.eps_w, &state.reference_epsilon(&xw, noise.t, cond));
    let dl = sq_err(&noise.eps_l, &state.epsilon_with_params(&trainable.params, &xl, noise.t, cond))
        - sq_err(&noise.eps_l, &state.reference_epsilon(&xl, noise.t, cond));
    Ok((dw, dl))
}

/// `-ln sigmoid(-beta T omega(lambda_t) (Delta L_w - Delta L_l))`.
pub fn dpo_loss(
    pair: &PreferencePair,
    noise: &PairNoise,
    cond: &[f64],
    state: &DenoiserState,
    sched: &NoiseSchedule,
    beta: f64,
    convention: SnrConvention,
) -> Result<f64> {
    let (dw, dl) = reconstruction_deltas(pair, noise, cond, &state.net, state, sched)?;
    Ok(dpo_from_deltas(dw, dl, beta * sched.steps() as f64 * timestep_weight(lambda(sched, noise.t, convention))))
}

/// `softplus(scale (Delta L_w - Delta L_l))`, the loss given the two deltas.
pub fn dpo_from_deltas(delta_w: f64, delta_l: f64, scale: f64) -> f64 {
    softplus(scale * (delta_w - delta_l))
}

/// Loss and its gradient with respect to the trainable parameters; the
/// gradient is accumulated (times `grad_scale`) into `grad`.
pub fn dpo_loss_grad(
    pair: &PreferencePair,
    noise: &PairNoise,
    cond: &[f64],
    state: &DenoiserState,
    sched: &NoiseSchedule,
    beta: f64,
    grad: &mut [f64],
    grad_scale: f64,
) -> Result<f64> {
    let t = noise.t;
    let xw = forward_noising(&pair.winner.features, t, &noise.eps_w, sched)?;
    let xl = forward_noising(&pair.loser.features, t, &noise.eps_l, sched)?;
    let (pw, trw) = state.epsilon_traced(&xw, t, cond);
    let (pl, trl) = state.epsilon_traced(&xl, t, cond);
    let dw = sq_err(&noise.eps_w, &pw) - sq_err(&noise.eps_w, &state.reference_epsilon(&xw, t, cond));
    let dl = sq_err(&noise.eps_l, &pl) - sq_err(&noise.eps_l, &state.reference_epsilon(&xl, t, cond));
    let scale = beta * sched.steps() as f64 * timestep_weight(lambda(sched, t, SnrConvention::Ratio));
    let z = scale * (dw - dl);
    let coeff = sigmoid(z) * scale * grad_scale;
    if coeff != 0.0 {
        let gw: Vec<f64> = pw.iter().zip(&noise.eps_w).map(|(p, e)| 2.0 * (p - e)).collect();
        let gl: Vec<f64> = pl.iter().zip(&noise.eps_l).map(|(p, e)| -2.0 * (p - e)).collect();
        state.epsilon_vjp(&trw, &gw, Some((&mut *grad, coeff)));
        state.epsilon_vjp(&trl, &gl, Some((&mut *grad, coeff)));
    }
    Ok(softplus(z))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub lr: f64,
    /// Samples generated per class per outer iteration.
    pub batch_size: usize,
    pub iterations: usize,
    pub rho: f64,
    pub pair_cap: usize,
    /// Total DPO steps per class across all outer iterations.
    pub max_steps_per_class: usize,
    pub pairs_per_step: usize,
    pub guidance: f64,
    pub sampling_steps: usize,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 500.0,
            lr: 1e-4,
            batch_size: 64,
            iterations: 3,
            rho: 0.25,
            pair_cap: 64,
            max_steps_per_class: 400,
            pairs_per_step: 8,
            guidance: 2.0,
            sampling_steps: 50,
            seed: 0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 {
            return Err(Error::Config("DPO beta must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 0.5) {
            return Err(Error::Config(format!("selection ratio {} outside (0, 0.5]", self.rho)));
        }
        if self.lr <= 0.0 || self.batch_size < 2 || self.pairs_per_step == 0 {
            return Err(Error::Config("DPO lr, batch size and pairs per step must be positive".into()));
        }
        Ok(())
    }
}

/// Generates `count` samples of `class` from the current trainable model.
pub fn generate_class(
    state: &DenoiserState,
    token: &ClassToken,
    count: usize,
    guidance: f64,
    sampling_steps: usize,
    sched: &NoiseSchedule,
    r: &mut rng::Rng,
) -> Result<Vec<Sample>> {
    (0..count)
        .map(|_| {
            let eps = rng::normal_vec(r, state.feature_dim);
            ddim_sample_steps(&eps, &token.embedding, guidance, sched, state, sampling_steps)
                .map(|x| Sample::new(x, token.class))
        })
        .collect()
}

/// Generates `per_class` samples for every token.
pub fn generate_dataset(
    state: &DenoiserState,
    tokens: &[ClassToken],
    num_classes: usize,
    per_class: usize,
    guidance: f64,
    sampling_steps: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<LabeledDataset> {
    let mut samples = Vec::with_capacity(per_class * tokens.len());
    for tok in tokens {
        let mut r = rng::stream(seed, &format!("generate/class/{}", tok.class));
        samples.extend(generate_class(state, tok, per_class, guidance, sampling_steps, sched, &mut r)?);
    }
    LabeledDataset::new(samples, num_classes, state.feature_dim, Provenance::Synthetic)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MlcoIteration {
    pub iteration: usize,
    pub mean_score: f64,
    pub pairs: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MlcoLog {
    pub iterations: Vec<MlcoIteration>,
    /// Pairs built in the last iteration, kept for auditing.
    #[serde(skip)]
    pub last_pairs: Vec<PreferencePair>,
}

fn token_for(tokens: &[ClassToken], class: usize) -> Result<&ClassToken> {
    tokens
        .iter()
        .find(|t| t.class == class)
        .ok_or_else(|| Error::Config(format!("no class token for class {class}")))
}

/// Iterative DPO fine-tuning driven by utility scores.
pub fn run_mlco(
    state: &DenoiserState,
    tokens: &[ClassToken],
    phi: &WeightNetParams,
    classifier: &ClassifierState,
    config: &DpoConfig,
    sched: &NoiseSchedule,
) -> Result<(DenoiserState, MlcoLog)> {
    let mut state = state.clone();
    let mut log = MlcoLog::default();
    if config.iterations == 0 {
        return Ok((state, log));
    }
    config.validate()?;
    let k = classifier.num_classes();
    for c in 0..k {
        token_for(tokens, c)?;
    }
    let steps_per_iter = config.max_steps_per_class / config.iterations;
    let np = state.net.num_params();
    let mut opt = Adam::new(np);
    let mut r = rng::stream(config.seed, "mlco/steps");
    for it in 0..config.iterations {
        state.snapshot_reference();
        let mut gen = Vec::with_capacity(k * config.batch_size);
        for c in 0..k {
            let mut gr = rng::stream(config.seed, &format!("mlco/generate/{it}/{c}"));
            gen.extend(generate_class(
                &state,
                token_for(tokens, c)?,
                config.batch_size,
                config.guidance,
                config.sampling_steps,
                sched,
                &mut gr,
            )?);
        }
        let gen = LabeledDataset::new(gen, k, state.feature_dim, Provenance::Synthetic)?;
        let scores = score_samples(phi, classifier, &gen)?;
        let set = build_preference_pairs(&gen, &scores, config.rho, Some(config.pair_cap), config.seed ^ it as u64)?;
        if set.degenerate_classes.len() == k {
            return Err(Error::Degenerate(format!(
                "iteration {it}: every class produced tied utility scores; refusing to train on noise"
            )));
        }
        let mut per_class: Vec<Vec<&PreferencePair>> = vec![Vec::new(); k];
        for p in &set.pairs {
            if !set.degenerate_classes.contains(&p.class) {
                per_class[p.class].push(p);
            }
        }
        per_class.iter_mut().for_each(|v| v.shuffle(&mut r));
        let mut cursors = vec![0usize; k];
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        let mut steps = 0;
        for _ in 0..steps_per_iter {
            for c in 0..k {
                if per_class[c].is_empty() {
                    continue;
                }
                let cond = &token_for(tokens, c)?.embedding;
                let mut grad = vec![0.0; np];
                let m = config.pairs_per_step.min(per_class[c].len());
                for _ in 0..m {
                    let pair = per_class[c][cursors[c] % per_class[c].len()];
                    cursors[c] += 1;
                    let noise = PairNoise::draw(&mut r, sched, state.feature_dim);
                    loss_sum += dpo_loss_grad(pair, &noise, cond, &state, sched, config.beta, &mut grad, 1.0 / m as f64)?;
                    loss_n += 1;
                }
                opt.step(&mut state.net.params, &grad, config.lr);
                steps += 1;
            }
        }
        log.iterations.push(MlcoIteration {
            iteration: it,
            mean_score: scores.iter().sum::<f64>() / scores.len().max(1) as f64,
            pairs: set.pairs.len(),
            mean_loss: loss_sum / loss_n.max(1) as f64,
            steps,
        });
        log.last_pairs = set.pairs;
    }
    Ok((state, log))
}

/// Fraction of pairs on which `tuned` has a positive implicit-reward margin
/// relative to `base`, i.e. `Delta L_w < Delta L_l` averaged over `draws`
/// noise draws per pair.
pub fn implicit_reward_accuracy(
    pairs: &[PreferencePair],
    tuned: &DenoiserState,
    base: &Mlp,
    tokens: &[ClassToken],
    sched: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Validation("no pairs to evaluate".into()));
    }
    let mut judge = tuned.clone();
    judge.reference = base.clone();
    let mut r = rng::stream(seed, "mlco/implicit-reward");
    let mut positive = 0usize;
    for p in pairs {
        let cond = &token_for(tokens, p.class)?.embedding;
        let mut margin = 0.0;
        for _ in 0..draws.max(1) {
            let noise = PairNoise::draw(&mut r, sched, tuned.feature_dim);
            let (dw, dl) = reconstruction_deltas(p, &noise, cond, &judge.net, &judge, sched)?;
            margin += dl - dw;
        }
        if margin > 0.0 {
            positive += 1;
        }
    }
    Ok(positive as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Architecture;
    use crate::diffusion::DenoiserArch;

    fn scored(scores: &[f64], class_of: impl Fn(usize) -> usize, k: usize) -> (LabeledDataset, Vec<f64>) {
        let samples = (0..scores.len()).map(|i| Sample::new(vec![i as f64, 0.0], class_of(i))).collect();
        (LabeledDataset::new(samples, k, 2, Provenance::Synthetic).unwrap(), scores.to_vec())
    }

    #[test]
    fn zero_weight_net_scores_one_half() {
        let cls = ClassifierState::new(Architecture { hidden: 4 }, 2, 3, 0);
        let (d, _) = scored(&[0.0; 6], |i| i % 3, 3);
        let s = score_samples(&WeightNetParams::zeros(10), &cls, &d).unwrap();
        assert!(s.iter().all(|v| *v == 0.5));
        let (bad, _) = scored(&[0.0; 4], |i| i % 2, 2);
        assert!(matches!(score_samples(&WeightNetParams::zeros(10), &cls, &bad), Err(Error::Validation(_))));
    }

    #[test]
    fn scores_compose_loss_and_weight_net() {
        let cls = ClassifierState::new(Architecture { hidden: 5 }, 2, 2, 4);
        let phi = WeightNetParams::new(16, 2);
        let samples: Vec<Sample> = (0..8)
            .map(|i| Sample::new(vec![(i as f64 * 0.9).sin() * 2.0, (i as f64 * 1.3).cos()], i % 2))
            .collect();
        let d = LabeledDataset::new(samples.clone(), 2, 2, Provenance::Synthetic).unwrap();
        let got = score_samples(&phi, &cls, &d).unwrap();
        // Brute force: softmax cross-entropy from raw logits, then the weight-net formula.
        let expect: Vec<f64> = samples
            .iter()
            .map(|s| {
                let z = cls.logits(&s.features);
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                let loss = lse - z[s.label];
                let mut h = phi.b2;
                for j in 0..16 {
                    h += phi.w2[j] * (phi.w1[j] * loss + phi.b1[j]).max(0.0);
                }
                1.0 / (1.0 + (-h).exp())
            })
            .collect();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut order_got: Vec<usize> = (0..8).collect();
        order_got.sort_by(|&a, &b| got[a].total_cmp(&got[b]));
        let mut order_exp: Vec<usize> = (0..8).collect();
        order_exp.sort_by(|&a, &b| expect[a].total_cmp(&expect[b]));
        assert_eq!(order_got, order_exp);
    }

    #[test]
    fn eight_samples_quarter_ratio_gives_four_pairs() {
        let (d, s) = scored(&[0.3, 0.9, 0.1, 0.5, 0.7, 0.2, 0.8, 0.4], |_| 0, 1);
        let set = build_preference_pairs(&d, &s, 0.25, None, 0).unwrap();
        assert_eq!(set.pairs.len(), 4);
        let pairs: Vec<(f64, f64)> = set.pairs.iter().map(|p| (p.winner.features[0], p.loser.features[0])).collect();
        // Winners: indices 1 (0.9), 6 (0.8). Losers: 5 (0.2), 2 (0.1).
        assert_eq!(pairs, vec![(1.0, 5.0), (1.0, 2.0), (6.0, 5.0), (6.0, 2.0)]);
        assert!(set.degenerate_classes.is_empty());
    }

    #[test]
    fn tied_scores_follow_index_order() {
        let (d, s) = scored(&[0.5; 8], |_| 0, 1);
        let set = build_preference_pairs(&d, &s, 0.25, None, 0).unwrap();
        assert_eq!(set.degenerate_classes, vec![0]);
        let w: Vec<f64> = set.pairs.iter().map(|p| p.winner.features[0]).collect();
        let l: Vec<f64> = set.pairs.iter().map(|p| p.loser.features[0]).collect();
        assert_eq!(w, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(l, vec![6.0, 7.0, 6.0, 7.0]);
        assert!(set.pairs.iter().all(|p| p.winner_score >= p.loser_score && p.is_degenerate()));
    }

    #[test]
    fn half_ratio_on_four_is_disjoint() {
        let (d, s) = scored(&[0.1, 0.4, 0.3, 0.2], |_| 0, 1);
        let set = build_preference_pairs(&d, &s, 0.5, None, 0).unwrap();
        assert_eq!(set.pairs.len(), 4);
        for p in &set.pairs {
            assert!(p.winner_score > p.loser_score);
            assert!([1.0, 2.0].contains(&p.winner.features[0]));
            assert!([0.0, 3.0].contains(&p.loser.features[0]));
        }
        assert!(build_preference_pairs(&d, &s, 0.6, None, 0).is_err());
    }

    #[test]
    fn cap_subsamples_deterministically() {
        let scores: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let (d, s) = scored(&scores, |i| i % 2, 2);
        let a = build_preference_pairs(&d, &s, 0.25, Some(7), 3).unwrap();
        let b = build_preference_pairs(&d, &s, 0.25, Some(7), 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pairs.len(), 14);
    }

    fn tiny_state() -> DenoiserState {
        DenoiserState::new(2, DenoiserArch { hidden: 6, time_dim: 4, cond_dim: 2 }, 1)
    }

    fn pair() -> PreferencePair {
        PreferencePair {
            class: 0,
            winner: Sample::new(vec![1.0, -0.5], 0),
            loser: Sample::new(vec![-0.7, 0.2], 0),
            winner_score: 0.8,
            loser_score: 0.2,
        }
    }

    #[test]
    fn loss_is_ln2_at_reference() {
        let sched = NoiseSchedule::default();
        let s = tiny_state();
        let mut r = rng::stream(0, "test");
        for _ in 0..100 {
            let noise = PairNoise::draw(&mut r, &sched, 2);
            let p = PreferencePair {
                winner: Sample::new(rng::normal_vec(&mut r, 2), 0),
                loser: Sample::new(rng::normal_vec(&mut r, 2), 0),
                ..pair()
            };
            let beta = r.random_range(1.0..10_000.0);
            let l = dpo_loss(&p, &noise, &[0.1, 0.2], &s, &sched, beta, SnrConvention::Ratio).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let sched = NoiseSchedule::default();
        let mut s = tiny_state();
        let mut r = rng::stream(5, "perturb");
        s.net.params.iter_mut().for_each(|p| *p += 0.01 * r.random_range(-1.0..1.0));
        let noise = PairNoise { t: 12, eps_w: vec![0.3, -1.1], eps_l: vec![0.8, 0.4] };
        let cond = [0.1, 0.2];
        let beta = 0.05;
        let mut grad = vec![0.0; s.net.num_params()];
        dpo_loss_grad(&pair(), &noise, &cond, &s, &sched, beta, &mut grad, 1.0).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..grad.len() {
            let mut up = s.clone();
            up.net.params[i] += h;
            let mut dn = s.clone();
            dn.net.params[i] -= h;
            let fd = (dpo_loss(&pair(), &noise, &cond, &up, &sched, beta, SnrConvention::Ratio).unwrap()
                - dpo_loss(&pair(), &noise, &cond, &dn, &sched, beta, SnrConvention::Ratio).unwrap())
                / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs());
            if scale > 1e-8 {
                worst = worst.max((fd - grad[i]).abs() / scale);
            }
        }
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn loss_increases_with_winner_error() {
        let mut r = rng::stream(2, "deltas");
        let h = 1e-7;
        for _ in 0..200 {
            let (dw, dl) = (r.random_range(-1e-3..1e-3), r.random_range(-1e-3..1e-3));
            let scale = r.random_range(1.0..1000.0);
            let fd = (dpo_from_deltas(dw + h, dl, scale) - dpo_from_deltas(dw - h, dl, scale)) / (2.0 * h);
            assert!(fd > 0.0);
            let fd_l = (dpo_from_deltas(dw, dl + h, scale) - dpo_from_deltas(dw, dl - h, scale)) / (2.0 * h);
            assert!(fd_l < 0.0);
        }
    }

    #[test]
    fn lambda_convention_does_not_change_loss() {
        let sched = NoiseSchedule::default();
        let mut s = tiny_state();
        s.net.params.iter_mut().for_each(|p| *p *= 1.01);
        for t in [1, 10, 50] {
            let noise = PairNoise { t, eps_w: vec![0.3, -1.1], eps_l: vec![0.8, 0.4] };
            let a = dpo_loss(&pair(), &noise, &[0.1, 0.2], &s, &sched, 3.0, SnrConvention::Ratio).unwrap();
            let b = dpo_loss(&pair(), &noise, &[0.1, 0.2], &s, &sched, 3.0, SnrConvention::LogRatio).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_iterations_leave_state_unchanged() {
        let s = tiny_state();
        let cls = ClassifierState::new(Architecture { hidden: 4 }, 2, 2, 0);
        let toks = vec![ClassToken { class: 0, embedding: vec![0.0; 2] }, ClassToken { class: 1, embedding: vec![1.0; 2] }];
        let cfg = DpoConfig { iterations: 0, ..Default::default() };
        let (out, log) = run_mlco(&s, &toks, &WeightNetParams::zeros(4), &cls, &cfg, &NoiseSchedule::default()).unwrap();
        assert_eq!(out, s);
        assert!(log.iterations.is_empty());
    }

    #[test]
    fn all_tied_scores_abort() {
        let s = tiny_state();
        let cls = ClassifierState::new(Architecture { hidden: 4 }, 2, 2, 0);
        let toks = vec![ClassToken { class: 0, embedding: vec![0.0; 2] }, ClassToken { class: 1, embedding: vec![1.0; 2] }];
        let cfg = DpoConfig { iterations: 1, batch_size: 8, sampling_steps: 5, ..Default::default() };
        let r = run_mlco(&s, &toks, &WeightNetParams::zeros(4), &cls, &cfg, &NoiseSchedule::default());
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }
}
