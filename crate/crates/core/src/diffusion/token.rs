use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::denoiser::{ClassToken, DenoiserState};
use super::schedule::{forward_noising, NoiseSchedule};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::rng;

/// Fixed random projection (row-major `cond_dim x feature_dim`) used to
/// place class-mean features in embedding space.
pub fn token_projection(feature_dim: usize, cond_dim: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "token/projection");
    let scale = 1.0 / (feature_dim as f64).sqrt();
    rng::normal_vec(&mut r, cond_dim * feature_dim).into_iter().map(|v| v * scale).collect()
}

/// Initial token for every class: projected class-mean feature.
pub fn initial_tokens(data: &LabeledDataset, cond_dim: usize, seed: u64) -> Result<Vec<ClassToken>> {
    let d = data.feature_dim;
    let proj = token_projection(d, cond_dim, seed);
    (0..data.num_classes)
        .map(|c| {
            let idx = data.class_indices(c);
            if idx.is_empty() {
                return Err(Error::Config(format!("no samples to initialise token of class {c}")));
            }
            let mut mean = vec![0.0; d];
            for &i in &idx {
                mean.iter_mut().zip(&data.samples[i].features).for_each(|(m, x)| *m += x / idx.len() as f64);
            }
            let embedding = (0..cond_dim)
                .map(|r| proj[r * d..(r + 1) * d].iter().zip(&mean).map(|(p, m)| p * m).sum())
                .collect();
            Ok(ClassToken { class: c, embedding })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenConfig {
    pub lr: f64,
    pub steps: usize,
    /// Real instances per class.
    pub shots: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TokenConfig {
    fn default() -> Self {
        Self { lr: 1e-4, steps: 400, shots: 16, batch_size: 16, seed: 0 }
    }
}

/// Textual inversion: fits only the condition embedding of `init.class` to the
/// few-shot set under the frozen denoiser. Returns the token and per-step losses.
pub fn learn_class_token(
    init: &ClassToken,
    few_shot: &LabeledDataset,
    state: &DenoiserState,
    sched: &NoiseSchedule,
    config: &TokenConfig,
) -> Result<(ClassToken, Vec<f64>)> {
    if few_shot.is_empty() {
        return Err(Error::Config(format!("empty few-shot set for class {}", init.class)));
    }
    if few_shot.samples.iter().any(|s| s.label != init.class) {
        return Err(Error::Validation(format!("few-shot set contains labels other than {}", init.class)));
    }
    if init.embedding.len() != state.cond_dim() {
        return Err(Error::Config("token width does not match the denoiser".into()));
    }
    let mut emb = init.embedding.clone();
    let mut opt = Adam::new(emb.len());
    let mut r = rng::stream(config.seed, &format!("token/train/{}", init.class));
    let bs = config.batch_size.max(1);
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut grad = vec![0.0; emb.len()];
        let mut loss = 0.0;
        for _ in 0..bs {
            let s = &few_shot.samples[r.random_range(0..few_shot.len())];
            let t = r.random_range(1..=sched.steps());
            let eps = rng::normal_vec(&mut r, state.feature_dim);
            let xt = forward_noising(&s.features, t, &eps, sched)?;
            let (pred, tr) = state.epsilon_traced(&xt, t, &emb);
            let diff: Vec<f64> = pred.iter().zip(&eps).map(|(p, e)| p - e).collect();
            loss += diff.iter().map(|v| v * v).sum::<f64>() / bs as f64;
            let g: Vec<f64> = diff.iter().map(|v| 2.0 * v / bs as f64).collect();
            let (_, gc) = state.epsilon_vjp(&tr, &g, None);
            grad.iter_mut().zip(&gc).for_each(|(a, b)| *a += b);
        }
        losses.push(loss);
        opt.step(&mut emb, &grad, config.lr);
    }
    Ok((ClassToken { class: init.class, embedding: emb }, losses))
}
