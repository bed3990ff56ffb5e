//! The downstream classifier: a one-hidden-layer tanh MLP trained with
//! per-sample weights, whose hidden activations double as the feature space
//! used for prototypes, diversity and the convex influence probe.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::nn::{cosine_lr, Activation, Mlp, Sgd, Trace};
use crate::rng;

/// Architecture tag. `mlp-small` and `mlp-wide` are the two named variants;
/// `mlp-<width>` selects any other hidden width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Architecture {
    pub hidden: usize,
}

impl Architecture {
    pub const SMALL: Architecture = Architecture { hidden: 64 };
    pub const WIDE: Architecture = Architecture { hidden: 256 };
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.hidden {
            64 => f.write_str("mlp-small"),
            256 => f.write_str("mlp-wide"),
            w => write!(f, "mlp-{w}"),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-small" => Ok(Self::SMALL),
            "mlp-wide" => Ok(Self::WIDE),
            other => other
                .strip_prefix("mlp-")
                .and_then(|w| w.parse::<usize>().ok())
                .filter(|w| *w > 0)
                .map(|hidden| Architecture { hidden })
                .ok_or_else(|| Error::Config(format!("unknown architecture tag '{other}'"))),
        }
    }
}

impl TryFrom<String> for Architecture {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierState {
    pub arch: Architecture,
    pub net: Mlp,
}

/// Numerically stable cross-entropy from logits plus its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[label] -= 1.0;
    (loss.max(0.0), grad)
}

impl ClassifierState {
    pub fn new(arch: Architecture, feature_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "classifier/init");
        let net = Mlp::new(&[feature_dim, arch.hidden, num_classes], Activation::Tanh, &mut r);
        Self { arch, net }
    }

    pub fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.net.forward(x)
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        best
    }

    fn check_label(&self, s: &Sample) -> Result<()> {
        if s.label >= self.num_classes() {
            return Err(Error::Range(format!("label {} >= K = {}", s.label, self.num_classes())));
        }
        if s.features.len() != self.feature_dim() {
            return Err(Error::Validation("feature dimension mismatch".into()));
        }
        Ok(())
    }

    pub fn sample_loss(&self, s: &Sample) -> Result<f64> {
        self.check_label(s)?;
        Ok(cross_entropy(&self.logits(&s.features), s.label).0)
    }

    /// Cross-entropy of every sample in batch order.
    pub fn per_sample_loss(&self, batch: &[Sample]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::Validation("per-sample loss of an empty batch".into()));
        }
        batch.iter().map(|s| self.sample_loss(s)).collect()
    }

    /// Gradient of a single sample's loss w.r.t. all parameters.
    pub fn sample_grad(&self, s: &Sample) -> (f64, Vec<f64>) {
        let (logits, trace) = self.net.forward_trace(&s.features);
        let (loss, g) = cross_entropy(&logits, s.label);
        let mut pg = vec![0.0; self.num_params()];
        self.net.backward(&trace, &g, Some((&mut pg, 1.0)));
        (loss, pg)
    }

    /// `(1/n) sum_i w_i * L_i` and its parameter gradient. `weights = None`
    /// means every weight is one.
    pub fn weighted_loss_grad(&self, batch: &[Sample], weights: Option<&[f64]>) -> (f64, Vec<f64>) {
        let n = batch.len() as f64;
        let mut pg = vec![0.0; self.num_params()];
        let mut total = 0.0;
        for (i, s) in batch.iter().enumerate() {
            let (logits, trace) = self.net.forward_trace(&s.features);
            let (loss, g) = cross_entropy(&logits, s.label);
            match weights {
                Some(w) => {
                    total += w[i] * loss;
                    if w[i] != 0.0 {
                        self.net.backward(&trace, &g, Some((&mut pg, w[i] / n)));
                    }
                }
                None => {
                    total += loss;
                    self.net.backward(&trace, &g, Some((&mut pg, 1.0 / n)));
                }
            }
        }
        (total / n, pg)
    }

    /// Mean loss over a batch with parameters replaced by `params`.
    pub fn mean_loss_with(&self, params: &[f64], batch: &[Sample]) -> f64 {
        let mut probe = self.clone();
        probe.net.params.copy_from_slice(params);
        batch.iter().map(|s| cross_entropy(&probe.logits(&s.features), s.label).0).sum::<f64>()
            / batch.len() as f64
    }

    /// Penultimate-layer activations.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        self.net.penultimate(x)
    }

    pub fn features_trace(&self, x: &[f64]) -> (Vec<f64>, Trace) {
        let (_, trace) = self.net.forward_trace(x);
        (trace.inputs.last().unwrap().clone(), trace)
    }

    /// Pulls `dL/dfeatures` back to `dL/dx`.
    pub fn features_vjp(&self, trace: &Trace, grad_features: &[f64]) -> Vec<f64> {
        self.net.backward_from_hidden(trace, self.net.num_layers() - 2, grad_features, None)
    }

    /// Loss of `(x, label)` and its gradient with respect to `x`.
    pub fn loss_input_grad(&self, x: &[f64], label: usize) -> (f64, Vec<f64>) {
        let (logits, trace) = self.net.forward_trace(x);
        let (loss, g) = cross_entropy(&logits, label);
        (loss, self.net.backward(&trace, &g, None))
    }

    /// Fraction of correctly classified samples.
    pub fn evaluate(&self, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Validation("cannot evaluate on an empty dataset".into()));
        }
        let correct = data.samples.iter().filter(|s| self.predict(&s.features) == s.label).count();
        Ok(correct as f64 / data.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub cosine: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 60, batch_size: 256, lr: 0.01, momentum: 0.9, weight_decay: 5e-4, cosine: true, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean weighted batch loss per optimisation step.
    pub step_losses: Vec<f64>,
}

fn train_impl(
    state: &ClassifierState,
    data: &LabeledDataset,
    weights: Option<&[f64]>,
    config: &TrainConfig,
) -> Result<(ClassifierState, TrainLog)> {
    let mut state = state.clone();
    let mut log = TrainLog::default();
    if data.is_empty() || config.epochs == 0 {
        return Ok((state, log));
    }
    let bs = config.batch_size.max(1);
    let steps_per_epoch = data.len().div_ceil(bs);
    let total = steps_per_epoch * config.epochs;
    let mut opt = Sgd::new(state.num_params(), config.momentum, config.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut r = rng::stream(config.seed, "classifier/batches");
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(bs) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| data.samples[i].clone()).collect();
            let w: Option<Vec<f64>> = weights.map(|w| chunk.iter().map(|&i| w[i]).collect());
            let (loss, grad) = state.weighted_loss_grad(&batch, w.as_deref());
            let lr = if config.cosine { cosine_lr(config.lr, step, total) } else { config.lr };
            opt.step(&mut state.net.params, &grad, lr);
            log.step_losses.push(loss);
            step += 1;
        }
    }
    Ok((state, log))
}

/// Mini-batch SGD with momentum on `(1/n) sum_i w_i L_i`.
pub fn train_weighted(
    state: &ClassifierState,
    data: &LabeledDataset,
    weights: &[f64],
    config: &TrainConfig,
) -> Result<(ClassifierState, TrainLog)> {
    if weights.len() != data.len() {
        return Err(Error::Validation(format!(
            "{} weights for {} samples",
            weights.len(),
            data.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::Validation(format!("weight {w} outside [0,1]")));
    }
    data.validate()?;
    train_impl(state, data, Some(weights), config)
}

/// Plain (unweighted) training with the same batching and schedule.
pub fn train(
    state: &ClassifierState,
    data: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(ClassifierState, TrainLog)> {
    data.validate()?;
    train_impl(state, data, None, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_task, Mode, Provenance, SplitSizes, TaskSpec};

    fn blobs(seed: u64) -> LabeledDataset {
        let spec = TaskSpec {
            num_classes: 3,
            modes: (0..3)
                .map(|c| {
                    let a = c as f64 * 2.1;
                    vec![Mode { mean: vec![3.0 * a.cos(), 3.0 * a.sin()], scale: 0.5, weight: 1.0 }]
                })
                .collect(),
            validation_weights: vec![vec![1.0]; 3],
            label_noise: 0.0,
        };
        make_synthetic_task(&spec, SplitSizes { train: 90, validation: 3, test: 3 }, seed)
            .unwrap()
            .real_train
    }

    #[test]
    fn architecture_tags_round_trip() {
        for tag in ["mlp-small", "mlp-wide", "mlp-17"] {
            assert_eq!(tag.parse::<Architecture>().unwrap().to_string(), tag);
        }
        assert!("cnn".parse::<Architecture>().is_err());
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut c = ClassifierState::new(Architecture { hidden: 4 }, 2, 5, 0);
        c.net.params.iter_mut().for_each(|p| *p = 0.0);
        let batch = vec![Sample::new(vec![1.0, 2.0], 3), Sample::new(vec![-1.0, 0.5], 0)];
        for l in c.per_sample_loss(&batch).unwrap() {
            assert!((l - 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_correct_logits_give_zero_loss() {
        let (loss, _) = cross_entropy(&[800.0, -800.0, 0.0], 0);
        assert!(loss < 1e-300);
        let (loss, _) = cross_entropy(&[-800.0, 800.0], 0);
        assert!((loss - 1600.0).abs() < 1e-9);
    }

    #[test]
    fn batch_losses_match_single_calls() {
        let c = ClassifierState::new(Architecture { hidden: 8 }, 2, 3, 4);
        let d = blobs(1);
        let batch = &d.samples[..3];
        let all = c.per_sample_loss(batch).unwrap();
        assert_eq!(all.len(), 3);
        for (i, s) in batch.iter().enumerate() {
            assert_eq!(all[i], c.per_sample_loss(std::slice::from_ref(s)).unwrap()[0]);
        }
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let c = ClassifierState::new(Architecture { hidden: 8 }, 2, 3, 4);
        let bad = vec![Sample::new(vec![0.0, 0.0], 3)];
        assert!(matches!(c.per_sample_loss(&bad), Err(Error::Range(_))));
        assert!(c.per_sample_loss(&[]).is_err());
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let c = ClassifierState::new(Architecture { hidden: 8 }, 2, 3, 4);
        let d = blobs(2);
        let cfg = TrainConfig { epochs: 3, batch_size: 16, weight_decay: 0.0, ..Default::default() };
        let (out, _) = train_weighted(&c, &d, &vec![0.0; d.len()], &cfg).unwrap();
        assert_eq!(out.net.params, c.net.params);
    }

    #[test]
    fn unit_weights_match_unweighted_trajectory() {
        let c = ClassifierState::new(Architecture { hidden: 8 }, 2, 3, 4);
        let d = blobs(3);
        let cfg = TrainConfig { epochs: 4, batch_size: 16, seed: 9, ..Default::default() };
        let (a, la) = train_weighted(&c, &d, &vec![1.0; d.len()], &cfg).unwrap();
        let (b, lb) = train(&c, &d, &cfg).unwrap();
        assert_eq!(a.net.params, b.net.params);
        assert_eq!(la, lb);
    }

    #[test]
    fn weights_are_validated() {
        let c = ClassifierState::new(Architecture { hidden: 8 }, 2, 3, 4);
        let d = blobs(3);
        let cfg = TrainConfig::default();
        let mut w = vec![0.5; d.len()];
        w[7] = 1.5;
        assert!(matches!(train_weighted(&c, &d, &w, &cfg), Err(Error::Validation(_))));
        assert!(train_weighted(&c, &d, &w[..3], &cfg).is_err());
    }

    #[test]
    fn weighted_gradient_matches_finite_differences() {
        // 2 -> 8 -> 3 has 51 parameters.
        let c = ClassifierState::new(Architecture { hidden: 8 }, 2, 3, 5);
        assert!(c.num_params() <= 60);
        let d = blobs(4);
        let batch = &d.samples[..12];
        let w: Vec<f64> = (0..12).map(|i| (i as f64 + 1.0) / 13.0).collect();
        let (_, grad) = c.weighted_loss_grad(batch, Some(&w));
        let objective = |p: &[f64]| {
            let mut probe = c.clone();
            probe.net.params.copy_from_slice(p);
            probe.weighted_loss_grad(batch, Some(&w)).0
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..c.num_params() {
            let mut p = c.net.params.clone();
            p[i] += h;
            let up = objective(&p);
            p[i] -= 2.0 * h;
            let dn = objective(&p);
            let fd = (up - dn) / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6));
        }
        assert!(worst <= 1e-4, "relative error {worst}");
    }

    #[test]
    fn weighted_gradient_is_linear_in_weights() {
        let c = ClassifierState::new(Architecture { hidden: 8 }, 2, 3, 5);
        let d = blobs(5);
        let batch = &d.samples[..10];
        let w1: Vec<f64> = (0..10).map(|i| (i % 3) as f64 / 2.0).collect();
        let w2: Vec<f64> = (0..10).map(|i| ((i * 7) % 5) as f64 / 4.0).collect();
        let avg: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| 0.5 * (a + b)).collect();
        let (_, g1) = c.weighted_loss_grad(batch, Some(&w1));
        let (_, g2) = c.weighted_loss_grad(batch, Some(&w2));
        let (_, ga) = c.weighted_loss_grad(batch, Some(&avg));
        for i in 0..g1.len() {
            assert!((0.5 * (g1[i] + g2[i]) - ga[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn features_are_deterministic_and_have_hidden_width() {
        let c = ClassifierState::new(Architecture { hidden: 12 }, 2, 3, 6);
        let x = [0.3, -0.4];
        assert_eq!(c.features(&x), c.features(&x));
        assert_eq!(c.features(&x).len(), 12);
    }

    #[test]
    fn class_mean_feature_is_mean_of_features() {
        let c = ClassifierState::new(Architecture { hidden: 12 }, 2, 3, 6);
        let d = blobs(6).restrict_to_class(1);
        let few: Vec<&Sample> = d.samples.iter().take(16).collect();
        assert_eq!(few.len(), 16);
        let feats: Vec<Vec<f64>> = few.iter().map(|s| c.features(&s.features)).collect();
        let mean: Vec<f64> = (0..12).map(|j| feats.iter().map(|f| f[j]).sum::<f64>() / 16.0).collect();
        // Same mean accumulated in reverse order agrees to rounding.
        let rev: Vec<f64> = (0..12).map(|j| feats.iter().rev().map(|f| f[j]).sum::<f64>() / 16.0).collect();
        for j in 0..12 {
            assert!((mean[j] - rev[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_predictor_scores_one_over_k() {
        let mut c = ClassifierState::new(Architecture { hidden: 4 }, 2, 3, 0);
        c.net.params.iter_mut().for_each(|p| *p = 0.0);
        let off = c.net.layer_offset(1) + 4 * 3;
        c.net.params[off + 2] = 1.0; // bias of class 2
        let d = blobs(7);
        assert!((c.evaluate(&d).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let empty = LabeledDataset::empty(3, 2, Provenance::Test);
        assert!(c.evaluate(&empty).is_err());
    }

    #[test]
    fn memoriser_scores_one_and_accuracy_ignores_order() {
        let c = ClassifierState::new(Architecture { hidden: 32 }, 2, 3, 1);
        let d = blobs(8);
        let cfg = TrainConfig { epochs: 300, batch_size: 30, lr: 0.05, ..Default::default() };
        let (c, _) = train(&c, &d, &cfg).unwrap();
        assert_eq!(c.evaluate(&d).unwrap(), 1.0);
        let mut r = rng::stream(0, "perm");
        let shuffled = crate::data::shuffled(&d, &mut r);
        assert_eq!(c.evaluate(&shuffled).unwrap(), c.evaluate(&d).unwrap());
    }
}
