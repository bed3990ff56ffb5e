use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp, Trace};
use crate::rng;

/// Learned condition embedding for one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassToken {
    pub class: usize,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserArch {
    pub hidden: usize,
    /// Width of the sinusoidal timestep encoding (even).
    pub time_dim: usize,
    pub cond_dim: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self { hidden: 128, time_dim: 32, cond_dim: 16 }
    }
}

/// Noise predictor `eps(x_t, t, c)` plus a frozen reference copy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserState {
    pub feature_dim: usize,
    pub arch: DenoiserArch,
    pub net: Mlp,
    pub reference: Mlp,
    /// Embedding used for the unconditional branch of guidance.
    pub null_token: Vec<f64>,
}

/// Sinusoidal encoding of an integer timestep: `[sin(t w_i), cos(t w_i)]`
/// with `w_i = 10000^(-i / (dim/2))`.
pub fn timestep_encoding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * w).sin();
        out[half + i] = (t as f64 * w).cos();
    }
    out
}

/// Forward record of one noise prediction, enough to back-propagate.
#[derive(Clone, Debug)]
pub struct EpsTrace {
    trace: Trace,
}

impl DenoiserState {
    pub fn new(feature_dim: usize, arch: DenoiserArch, seed: u64) -> Self {
        let mut r = rng::stream(seed, "denoiser/init");
        let input = feature_dim + arch.time_dim + arch.cond_dim;
        let net = Mlp::new(&[input, arch.hidden, arch.hidden, feature_dim], Activation::Silu, &mut r);
        let null_token = (0..arch.cond_dim).map(|_| r.random_range(-0.1..0.1)).collect();
        Self { feature_dim, reference: net.clone(), net, null_token, arch }
    }

    pub fn cond_dim(&self) -> usize {
        self.arch.cond_dim
    }

    /// Freezes the current trainable parameters as the reference copy.
    pub fn snapshot_reference(&mut self) {
        self.reference = self.net.clone();
    }

    fn input(&self, x: &[f64], t: usize, cond: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.net.input_dim());
        v.extend_from_slice(x);
        v.extend(timestep_encoding(t, self.arch.time_dim));
        v.extend_from_slice(cond);
        v
    }

    pub fn epsilon(&self, x: &[f64], t: usize, cond: &[f64]) -> Vec<f64> {
        self.net.forward(&self.input(x, t, cond))
    }

    pub fn reference_epsilon(&self, x: &[f64], t: usize, cond: &[f64]) -> Vec<f64> {
        self.reference.forward(&self.input(x, t, cond))
    }

    pub fn epsilon_with_params(&self, params: &[f64], x: &[f64], t: usize, cond: &[f64]) -> Vec<f64> {
        let net = Mlp { sizes: self.net.sizes.clone(), activation: self.net.activation, params: params.to_vec() };
        net.forward(&self.input(x, t, cond))
    }

    pub fn epsilon_traced(&self, x: &[f64], t: usize, cond: &[f64]) -> (Vec<f64>, EpsTrace) {
        let (out, trace) = self.net.forward_trace(&self.input(x, t, cond));
        (out, EpsTrace { trace })
    }

    /// Pulls `grad_eps` back to `(dL/dx, dL/dcond)`; optionally accumulates
    /// `scale * dL/dparams` into `param_grad`.
    pub fn epsilon_vjp(
        &self,
        tr: &EpsTrace,
        grad_eps: &[f64],
        param_grad: Option<(&mut [f64], f64)>,
    ) -> (Vec<f64>, Vec<f64>) {
        let g = self.net.backward(&tr.trace, grad_eps, param_grad);
        let d = self.feature_dim;
        let c0 = d + self.arch.time_dim;
        (g[..d].to_vec(), g[c0..].to_vec())
    }
}

/// Guided prediction `(1 - omega) eps_uncond + omega eps_cond`, the usual
/// `eps_u + omega (eps_c - eps_u)` written so that `omega = 0` and `omega = 1`
/// return the branch predictions exactly.
pub fn cfg_epsilon(x: &[f64], t: usize, cond: &[f64], omega: f64, state: &DenoiserState) -> Vec<f64> {
    if omega == 1.0 {
        return state.epsilon(x, t, cond);
    }
    let eu = state.epsilon(x, t, &state.null_token);
    if omega == 0.0 {
        return eu;
    }
    let ec = state.epsilon(x, t, cond);
    eu.iter().zip(&ec).map(|(u, c)| (1.0 - omega) * u + omega * c).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cond_dropout: f64,
    /// Std of Gaussian jitter added to class tokens during training, which
    /// keeps the denoiser well-behaved between and around the tokens.
    pub token_jitter: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 64, lr: 2e-3, cond_dropout: 0.1, token_jitter: 0.0, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainLog {
    pub step_losses: Vec<f64>,
    pub null_draws: usize,
    pub total_draws: usize,
}

impl DenoiserTrainLog {
    pub fn null_fraction(&self) -> f64 {
        self.null_draws as f64 / self.total_draws.max(1) as f64
    }
}

fn token_table(tokens: &[ClassToken], num_classes: usize, cond_dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut table = vec![None; num_classes];
    for tok in tokens {
        if tok.class < num_classes {
            if tok.embedding.len() != cond_dim {
                return Err(Error::Config(format!(
                    "token for class {} has width {}, expected {cond_dim}",
                    tok.class,
                    tok.embedding.len()
                )));
            }
            table[tok.class] = Some(tok.embedding.clone());
        }
    }
    table
        .into_iter()
        .enumerate()
        .map(|(c, e)| e.ok_or_else(|| Error::Config(format!("no class token for class {c}"))))
        .collect()
}

/// Standard denoising objective `||eps - eps(x_t, t, c)||^2` with Adam.
pub fn train_denoiser(
    data: &LabeledDataset,
    tokens: &[ClassToken],
    sched: &NoiseSchedule,
    arch: &DenoiserArch,
    config: &DenoiserTrainConfig,
) -> Result<(DenoiserState, DenoiserTrainLog)> {
    let state = DenoiserState::new(data.feature_dim, arch.clone(), config.seed);
    train_denoiser_from(state, data, tokens, sched, config)
}

pub fn train_denoiser_from(
    mut state: DenoiserState,
    data: &LabeledDataset,
    tokens: &[ClassToken],
    sched: &NoiseSchedule,
    config: &DenoiserTrainConfig,
) -> Result<(DenoiserState, DenoiserTrainLog)> {
    let table = token_table(tokens, data.num_classes, state.cond_dim())?;
    let mut log = DenoiserTrainLog::default();
    if config.steps == 0 {
        return Ok((state, log));
    }
    if data.is_empty() {
        return Err(Error::Config("denoiser training needs data".into()));
    }
    if !(0.0..=1.0).contains(&config.cond_dropout) {
        return Err(Error::Config("condition dropout must lie in [0, 1]".into()));
    }
    let d = state.feature_dim;
    let np = state.net.num_params();
    let cd = state.cond_dim();
    let mut opt = Adam::new(np + cd);
    let mut r = rng::stream(config.seed, "denoiser/train");
    let bs = config.batch_size.max(1);
    let mut grad = vec![0.0; np + cd];
    for _ in 0..config.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for _ in 0..bs {
            let s = &data.samples[r.random_range(0..data.len())];
            let t = r.random_range(1..=sched.steps());
            let eps = rng::normal_vec(&mut r, d);
            let use_null = r.random::<f64>() < config.cond_dropout;
            let cond: Vec<f64> = if use_null {
                log.null_draws += 1;
                state.null_token.clone()
            } else if config.token_jitter > 0.0 {
                let j = rng::normal_vec(&mut r, cd);
                table[s.label].iter().zip(j).map(|(c, j)| c + config.token_jitter * j).collect()
            } else {
                table[s.label].clone()
            };
            log.total_draws += 1;
            let xt = super::schedule::forward_noising(&s.features, t, &eps, sched)?;
            let (pred, tr) = state.epsilon_traced(&xt, t, &cond);
            let diff: Vec<f64> = pred.iter().zip(&eps).map(|(p, e)| p - e).collect();
            loss += diff.iter().map(|v| v * v).sum::<f64>();
            let g_out: Vec<f64> = diff.iter().map(|v| 2.0 * v / bs as f64).collect();
            let (_, gc) = state.epsilon_vjp(&tr, &g_out, Some((&mut grad[..np], 1.0)));
            if use_null {
                for (a, b) in grad[np..].iter_mut().zip(&gc) {
                    *a += b;
                }
            }
        }
        log.step_losses.push(loss / bs as f64);
        let mut flat = std::mem::take(&mut state.net.params);
        flat.extend_from_slice(&state.null_token);
        opt.step(&mut flat, &grad, config.lr);
        state.null_token = flat.split_off(np);
        state.net.params = flat;
    }
    state.snapshot_reference();
    Ok((state, log))
}

/// Mean denoising loss over fixed `(t, eps)` draws, for evaluation.
pub fn denoising_loss(
    state: &DenoiserState,
    data: &LabeledDataset,
    cond: &[f64],
    sched: &NoiseSchedule,
    draws_per_sample: usize,
    seed: u64,
) -> Result<f64> {
    let mut r = rng::stream(seed, "denoiser/eval");
    let mut total = 0.0;
    let mut n = 0usize;
    for s in &data.samples {
        for _ in 0..draws_per_sample {
            let t = r.random_range(1..=sched.steps());
            let eps = rng::normal_vec(&mut r, state.feature_dim);
            let xt = super::schedule::forward_noising(&s.features, t, &eps, sched)?;
            let pred = state.epsilon(&xt, t, cond);
            total += pred.iter().zip(&eps).map(|(p, e)| (p - e) * (p - e)).sum::<f64>();
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Provenance, Sample};

    fn small_arch() -> DenoiserArch {
        DenoiserArch { hidden: 16, time_dim: 8, cond_dim: 4 }
    }

    fn tokens(k: usize, cd: usize) -> Vec<ClassToken> {
        (0..k).map(|c| ClassToken { class: c, embedding: vec![c as f64; cd] }).collect()
    }

    #[test]
    fn encoding_has_unit_pairs() {
        let e = timestep_encoding(7, 32);
        assert_eq!(e.len(), 32);
        for i in 0..16 {
            assert!((e[i] * e[i] + e[16 + i] * e[16 + i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn guidance_endpoints_are_exact() {
        let s = DenoiserState::new(2, small_arch(), 1);
        let x = [0.3, -1.2];
        let c = [0.5, -0.5, 1.0, 2.0];
        assert_eq!(cfg_epsilon(&x, 5, &c, 0.0, &s), s.epsilon(&x, 5, &s.null_token));
        assert_eq!(cfg_epsilon(&x, 5, &c, 1.0, &s), s.epsilon(&x, 5, &c));
        let eu = s.epsilon(&x, 5, &s.null_token);
        let ec = s.epsilon(&x, 5, &c);
        let g = cfg_epsilon(&x, 5, &c, 2.0, &s);
        for i in 0..2 {
            assert!((g[i] - (eu[i] + 2.0 * (ec[i] - eu[i]))).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_steps_keep_initialisation() {
        let data = LabeledDataset::new(vec![Sample::new(vec![1.0, 1.0], 0)], 1, 2, Provenance::Real).unwrap();
        let cfg = DenoiserTrainConfig { steps: 0, seed: 9, ..Default::default() };
        let (s, log) = train_denoiser(&data, &tokens(1, 4), &NoiseSchedule::default(), &small_arch(), &cfg).unwrap();
        assert_eq!(s, DenoiserState::new(2, small_arch(), 9));
        assert!(log.step_losses.is_empty());
    }

    #[test]
    fn missing_token_is_config_error() {
        let data = LabeledDataset::new(
            vec![Sample::new(vec![1.0, 1.0], 0), Sample::new(vec![0.0, 1.0], 1)],
            2,
            2,
            Provenance::Real,
        )
        .unwrap();
        let cfg = DenoiserTrainConfig { steps: 1, ..Default::default() };
        let r = train_denoiser(&data, &tokens(1, 4), &NoiseSchedule::default(), &small_arch(), &cfg);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let s = DenoiserState::new(2, small_arch(), 3);
        let x = [0.4, -0.9];
        let c = [0.1, 0.2, -0.3, 0.4];
        let target = [0.5, -0.25];
        let loss = |p: &[f64]| {
            let e = s.epsilon_with_params(p, &x, 9, &c);
            e.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let (e, tr) = s.epsilon_traced(&x, 9, &c);
        let g_out: Vec<f64> = e.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
        let mut pg = vec![0.0; s.net.num_params()];
        let (gx, gc) = s.epsilon_vjp(&tr, &g_out, Some((&mut pg, 1.0)));
        let h = 1e-6;
        for i in (0..pg.len()).step_by(17) {
            let mut p = s.net.params.clone();
            p[i] += h;
            let up = loss(&p);
            p[i] -= 2.0 * h;
            let fd = (up - loss(&p)) / (2.0 * h);
            assert!((fd - pg[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", pg[i]);
        }
        let lx = |xx: &[f64], cc: &[f64]| {
            let e = s.epsilon(xx, 9, cc);
            e.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        for i in 0..2 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            assert!(((lx(&xp, &c) - lx(&xm, &c)) / (2.0 * h) - gx[i]).abs() < 1e-6);
        }
        for i in 0..4 {
            let mut cp = c;
            cp[i] += h;
            let mut cm = c;
            cm[i] -= h;
            assert!(((lx(&x, &cp) - lx(&x, &cm)) / (2.0 * h) - gc[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn overfits_single_sample() {
        let data = LabeledDataset::new(vec![Sample::new(vec![1.5, -0.5], 0)], 1, 2, Provenance::Real).unwrap();
        let sched = NoiseSchedule::default();
        let arch = DenoiserArch { hidden: 64, time_dim: 16, cond_dim: 4 };
        let toks = tokens(1, 4);
        let init = DenoiserState::new(2, arch.clone(), 5);
        let before = denoising_loss(&init, &data, &toks[0].embedding, &sched, 400, 1).unwrap();
        let cfg = DenoiserTrainConfig { steps: 1500, batch_size: 32, lr: 2e-3, seed: 5, ..Default::default() };
        let (s, _) = train_denoiser(&data, &toks, &sched, &arch, &cfg).unwrap();
        let after = denoising_loss(&s, &data, &toks[0].embedding, &sched, 400, 1).unwrap();
        assert!(after < 0.1 * before, "{before} -> {after}");
    }

    #[test]
    fn dropout_rate_is_respected() {
        let data = LabeledDataset::new(vec![Sample::new(vec![0.0, 0.0], 0)], 1, 2, Provenance::Real).unwrap();
        let cfg = DenoiserTrainConfig { steps: 200, batch_size: 50, cond_dropout: 0.1, ..Default::default() };
        let (_, log) = train_denoiser(&data, &tokens(1, 4), &NoiseSchedule::default(), &small_arch(), &cfg).unwrap();
        assert_eq!(log.total_draws, 10_000);
        // Binomial(10000, 0.1) has std 30.
        assert!((log.null_fraction() - 0.1).abs() < 0.009, "{}", log.null_fraction());
    }

    #[test]
    fn smoothed_training_loss_decreases() {
        let data = LabeledDataset::new(
            (0..40).map(|i| Sample::new(vec![(i % 2) as f64 * 3.0 - 1.5, 0.5], i % 2)).collect(),
            2,
            2,
            Provenance::Real,
        )
        .unwrap();
        let cfg = DenoiserTrainConfig { steps: 600, batch_size: 32, seed: 2, ..Default::default() };
        let (_, log) = train_denoiser(&data, &tokens(2, 4), &NoiseSchedule::default(), &small_arch(), &cfg).unwrap();
        let window = |a: usize| log.step_losses[a..a + 100].iter().sum::<f64>() / 100.0;
        assert!(window(500) < window(0));
        assert!(window(300) <= window(100) * 1.05);
    }
}
