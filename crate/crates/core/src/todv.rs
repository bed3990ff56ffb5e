//! Task-oriented data valuation.
//!
//! A tiny loss-conditioned network `W(l) = sigmoid(w2 . relu(w1 * l + b1) + b2)`
//! maps a per-sample classifier loss to a weight in (0,1). It is meta-learned
//! by differentiating the validation loss through a one-step lookahead of the
//! weighted classifier update:
//!
//! ```text
//! theta'(phi) = theta - lr * (1/n) sum_i W_phi(l_i) * grad_theta l_i(theta)
//! d L_val(theta'(phi)) / d phi
//!     = -(lr/n) sum_i <grad L_val(theta'), grad_theta l_i(theta)> * dW_phi(l_i)/dphi
//! ```
//!
//! The weight-net input `l_i` is treated as data (it does not carry a
//! gradient into `theta`), so the lookahead is linear in the weights and the
//! second-order term collapses to per-sample gradient inner products.

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierState, TrainConfig};
use crate::data::{LabeledDataset, Sample, SplitBundle};
use crate::error::{Error, Result};
use crate::nn::{dot, sigmoid, Adam, Sgd};
use crate::rng;

/// Parameters of the weight network, hidden width `H = w1.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightNetParams {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl WeightNetParams {
    pub const DEFAULT_HIDDEN: usize = 100;

    /// PyTorch `Linear` initialisation for a 1 -> H -> 1 network.
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "weightnet/init");
        let w1 = (0..hidden).map(|_| r.random_range(-1.0..1.0)).collect();
        let b1 = (0..hidden).map(|_| r.random_range(-1.0..1.0)).collect();
        let bound = 1.0 / (hidden as f64).sqrt();
        let w2 = (0..hidden).map(|_| r.random_range(-bound..bound)).collect();
        let b2 = r.random_range(-bound..bound);
        Self { w1, b1, w2, b2 }
    }

    pub fn zeros(hidden: usize) -> Self {
        Self { w1: vec![0.0; hidden], b1: vec![0.0; hidden], w2: vec![0.0; hidden], b2: 0.0 }
    }

    pub fn hidden(&self) -> usize {
        self.w1.len()
    }

    pub fn num_params(&self) -> usize {
        3 * self.hidden() + 1
    }

    /// Flat layout: `[w1 | b1 | w2 | b2]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend(&self.w1);
        v.extend(&self.b1);
        v.extend(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn from_flat(hidden: usize, v: &[f64]) -> Self {
        Self {
            w1: v[..hidden].to_vec(),
            b1: v[hidden..2 * hidden].to_vec(),
            w2: v[2 * hidden..3 * hidden].to_vec(),
            b2: v[3 * hidden],
        }
    }

    fn logit(&self, loss: f64) -> f64 {
        self.b2
            + self
                .w1
                .iter()
                .zip(&self.b1)
                .zip(&self.w2)
                .map(|((w1, b1), w2)| w2 * (w1 * loss + b1).max(0.0))
                .sum::<f64>()
    }

    pub fn weight(&self, loss: f64) -> f64 {
        sigmoid(self.logit(loss))
    }

    /// `dW/dloss`.
    pub fn weight_derivative(&self, loss: f64) -> f64 {
        let s = self.weight(loss);
        let dz: f64 = self
            .w1
            .iter()
            .zip(&self.b1)
            .zip(&self.w2)
            .filter(|((w1, b1), _)| *w1 * loss + **b1 > 0.0)
            .map(|((w1, _), w2)| w1 * w2)
            .sum();
        s * (1.0 - s) * dz
    }

    /// `dW(loss)/dphi` in the flat layout.
    pub fn weight_param_grad(&self, loss: f64) -> Vec<f64> {
        let h = self.hidden();
        let s = self.weight(loss);
        let ds = s * (1.0 - s);
        let mut g = vec![0.0; self.num_params()];
        for j in 0..h {
            let pre = self.w1[j] * loss + self.b1[j];
            if pre > 0.0 {
                g[j] = ds * self.w2[j] * loss;
                g[h + j] = ds * self.w2[j];
                g[2 * h + j] = ds * pre;
            }
        }
        g[3 * h] = ds;
        g
    }
}

/// Applies the weight net to every loss.
pub fn predict_weights(phi: &WeightNetParams, losses: &[f64]) -> Result<Vec<f64>> {
    if let Some(l) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::Validation(format!("non-finite loss {l}")));
    }
    Ok(losses.iter().map(|&l| phi.weight(l)).collect())
}

/// Plain gradient step on the weighted batch loss, without momentum.
/// Returns the provisional parameters `theta'(phi)`.
pub fn virtual_classifier_step(
    theta: &ClassifierState,
    phi: &WeightNetParams,
    train_batch: &[Sample],
    lr: f64,
) -> Result<Vec<f64>> {
    let losses = theta.per_sample_loss(train_batch)?;
    let weights = predict_weights(phi, &losses)?;
    let (_, grad) = theta.weighted_loss_grad(train_batch, Some(&weights));
    Ok(theta.net.params.iter().zip(&grad).map(|(p, g)| p - lr * g).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaGradient {
    pub grad: Vec<f64>,
    /// Validation loss at the provisional parameters.
    pub val_loss: f64,
}

/// Gradient of the validation loss at `theta'(phi)` with respect to `phi`.
pub fn meta_gradient(
    phi: &WeightNetParams,
    theta: &ClassifierState,
    train_batch: &[Sample],
    val_batch: &[Sample],
    inner_lr: f64,
) -> Result<MetaGradient> {
    if train_batch.is_empty() || val_batch.is_empty() {
        return Err(Error::Validation("meta update needs non-empty batches".into()));
    }
    let per_sample: Vec<(f64, Vec<f64>)> = train_batch.iter().map(|s| theta.sample_grad(s)).collect();
    let n = train_batch.len() as f64;
    let mut step = vec![0.0; theta.num_params()];
    for (loss, g) in &per_sample {
        let w = phi.weight(*loss);
        for (acc, gi) in step.iter_mut().zip(g) {
            *acc += w * gi / n;
        }
    }
    let mut lookahead = theta.clone();
    for (p, s) in lookahead.net.params.iter_mut().zip(&step) {
        *p -= inner_lr * s;
    }
    let (val_loss, val_grad) = lookahead.weighted_loss_grad(val_batch, None);

    let mut grad = vec![0.0; phi.num_params()];
    for (loss, g) in &per_sample {
        let coeff = -inner_lr / n * dot(&val_grad, g);
        if coeff != 0.0 {
            for (acc, d) in grad.iter_mut().zip(phi.weight_param_grad(*loss)) {
                *acc += coeff * d;
            }
        }
    }
    Ok(MetaGradient { grad, val_loss })
}

/// One Adam step on `phi` along the meta-gradient.
pub fn meta_update(
    phi: &WeightNetParams,
    opt: &mut Adam,
    theta: &ClassifierState,
    train_batch: &[Sample],
    val_batch: &[Sample],
    inner_lr: f64,
    meta_lr: f64,
) -> Result<(WeightNetParams, MetaGradient)> {
    let mg = meta_gradient(phi, theta, train_batch, val_batch, inner_lr)?;
    let mut flat = phi.to_flat();
    opt.step(&mut flat, &mg.grad, meta_lr);
    Ok((WeightNetParams::from_flat(phi.hidden(), &flat), mg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TodvConfig {
    /// Number of alternating iterations `T`.
    pub max_iters: usize,
    pub classifier_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub meta_lr: f64,
    pub train_batch: usize,
    pub val_batch: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TodvConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            classifier_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            meta_lr: 1e-3,
            train_batch: 128,
            val_batch: 128,
            hidden: WeightNetParams::DEFAULT_HIDDEN,
            seed: 0,
        }
    }
}

impl TodvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classifier_lr <= 0.0 || self.meta_lr < 0.0 || self.train_batch == 0 || self.val_batch == 0 || self.hidden == 0 {
            return Err(Error::Config("TODV learning rates, batch sizes and width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub iteration: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub mean_weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TodvLog {
    pub epochs: Vec<EpochMetrics>,
}

/// Alternates weighted classifier updates with weight-net meta updates on
/// `D_r ∪ D_g` against the validation split. Returns the weight net and the
/// co-trained classifier.
pub fn run_todv(
    bundle: &SplitBundle,
    synthetic_warmup: Option<&LabeledDataset>,
    init_classifier: &ClassifierState,
    config: &TodvConfig,
) -> Result<(WeightNetParams, ClassifierState, TodvLog)> {
    config.validate()?;
    if bundle.validation.is_empty() {
        return Err(Error::Config("TODV needs a non-empty validation split".into()));
    }
    let merged = match synthetic_warmup {
        Some(g) => bundle.real_train.concat(g)?,
        None => bundle.real_train.clone(),
    };
    let phi = WeightNetParams::new(config.hidden, config.seed);
    run_todv_from(&merged, &bundle.validation, phi, init_classifier, config)
}

/// The alternating loop from an explicit weight-net initialisation.
pub fn run_todv_from(
    train: &LabeledDataset,
    validation: &LabeledDataset,
    init_phi: WeightNetParams,
    init_classifier: &ClassifierState,
    config: &TodvConfig,
) -> Result<(WeightNetParams, ClassifierState, TodvLog)> {
    config.validate()?;
    if validation.is_empty() {
        return Err(Error::Config("TODV needs a non-empty validation split".into()));
    }
    if train.is_empty() {
        return Err(Error::Config("TODV needs training data".into()));
    }
    let mut phi = init_phi;
    let mut theta = init_classifier.clone();
    let mut log = TodvLog::default();
    if config.max_iters == 0 {
        return Ok((phi, theta, log));
    }
    let mut meta_opt = Adam::new(phi.num_params());
    let mut cls_opt = Sgd::new(theta.num_params(), config.momentum, config.weight_decay);
    let mut r = rng::stream(config.seed, "todv/train-batches");
    let mut rv = rng::stream(config.seed, "todv/val-batches");
    let n = config.train_batch.min(train.len());
    let m = config.val_batch.min(validation.len());
    let iters_per_epoch = train.len().div_ceil(n).max(1);
    let mut weight_sum = 0.0;
    let mut weight_count = 0usize;

    for t in 0..config.max_iters {
        let tb: Vec<Sample> =
            sample_indices(&mut r, train.len(), n).into_iter().map(|i| train.samples[i].clone()).collect();
        let vb: Vec<Sample> = sample_indices(&mut rv, validation.len(), m)
            .into_iter()
            .map(|i| validation.samples[i].clone())
            .collect();

        let losses = theta.per_sample_loss(&tb)?;
        let weights = predict_weights(&phi, &losses)?;
        weight_sum += weights.iter().sum::<f64>();
        weight_count += weights.len();

        let (new_phi, _) =
            meta_update(&phi, &mut meta_opt, &theta, &tb, &vb, config.classifier_lr, config.meta_lr)?;

        let (_, grad) = theta.weighted_loss_grad(&tb, Some(&weights));
        cls_opt.step(&mut theta.net.params, &grad, config.classifier_lr);
        phi = new_phi;

        if (t + 1) % iters_per_epoch == 0 || t + 1 == config.max_iters {
            log.epochs.push(EpochMetrics {
                epoch: log.epochs.len(),
                iteration: t + 1,
                train_accuracy: theta.evaluate(train)?,
                val_accuracy: theta.evaluate(validation)?,
                val_loss: theta.per_sample_loss(&validation.samples)?.iter().sum::<f64>()
                    / validation.len() as f64,
                mean_weight: weight_sum / weight_count.max(1) as f64,
            });
            weight_sum = 0.0;
            weight_count = 0;
        }
    }
    Ok((phi, theta, log))
}

/// Unweighted baseline with the same batch stream length and optimiser, for
/// comparisons against the co-trained classifier.
pub fn run_unweighted_baseline(
    train: &LabeledDataset,
    init_classifier: &ClassifierState,
    config: &TodvConfig,
) -> Result<ClassifierState> {
    let mut theta = init_classifier.clone();
    let mut opt = Sgd::new(theta.num_params(), config.momentum, config.weight_decay);
    let mut r = rng::stream(config.seed, "todv/train-batches");
    let n = config.train_batch.min(train.len());
    for _ in 0..config.max_iters {
        let tb: Vec<Sample> =
            sample_indices(&mut r, train.len(), n).into_iter().map(|i| train.samples[i].clone()).collect();
        let (_, grad) = theta.weighted_loss_grad(&tb, None);
        opt.step(&mut theta.net.params, &grad, config.classifier_lr);
    }
    Ok(theta)
}

/// Converts TODV hyperparameters into an equivalent epoch-based classifier config.
pub fn as_train_config(config: &TodvConfig, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: config.train_batch,
        lr: config.classifier_lr,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
        cosine: false,
        seed: config.seed,
    }
}
