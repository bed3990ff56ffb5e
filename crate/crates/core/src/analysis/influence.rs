use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::Histogram;
use crate::classifier::ClassifierState;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};

/// L2-regularised multinomial logistic regression on fixed features, fitted
/// by Newton's method. The objective is
/// `sum_i CE(W phi_i, y_i) + (N lambda / 2) ||W||^2`, with `phi_i` the
/// (optionally classifier-derived) features augmented by a constant 1.
#[derive(Clone, Debug)]
pub struct ConvexProbe {
    pub lambda: f64,
    /// When set, samples are mapped through the classifier's penultimate layer.
    pub featurizer: Option<ClassifierState>,
    pub tol: f64,
    pub max_iter: usize,
}

impl ConvexProbe {
    pub const DEFAULT_LAMBDA: f64 = 1e-3;

    pub fn new(lambda: f64, featurizer: Option<ClassifierState>) -> Self {
        Self { lambda, featurizer, tol: 1e-10, max_iter: 100 }
    }

    fn phi(&self, x: &[f64]) -> Vec<f64> {
        let mut f = match &self.featurizer {
            Some(c) => c.features(x),
            None => x.to_vec(),
        };
        f.push(1.0);
        f
    }
}

/// Design matrix of a dataset under a probe.
#[derive(Clone, Debug)]
pub struct ProbeData {
    pub phi: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ProbeData {
    pub fn new(probe: &ConvexProbe, data: &LabeledDataset) -> Self {
        Self {
            phi: data.samples.iter().map(|s| probe.phi(&s.features)).collect(),
            labels: data.labels(),
            num_classes: data.num_classes,
        }
    }

    fn dim(&self) -> usize {
        self.phi.first().map_or(0, |p| p.len()) * self.num_classes
    }
}

fn softmax(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    z.iter_mut().for_each(|v| {
        *v = (*v - m).exp();
        s += *v;
    });
    z.iter_mut().for_each(|v| *v /= s);
}

/// Class probabilities and cross-entropy of one row. `w` is `K x P` row-major.
fn row_probs(w: &[f64], phi: &[f64], k: usize) -> Vec<f64> {
    let p = phi.len();
    let mut z: Vec<f64> = (0..k).map(|c| w[c * p..(c + 1) * p].iter().zip(phi).map(|(a, b)| a * b).sum()).collect();
    softmax(&mut z);
    z
}

fn row_loss(w: &[f64], phi: &[f64], y: usize, k: usize) -> f64 {
    let p = phi.len();
    let z: Vec<f64> = (0..k).map(|c| w[c * p..(c + 1) * p].iter().zip(phi).map(|(a, b)| a * b).sum()).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[y]
}

/// `dCE/dw` for one row.
fn row_grad(w: &[f64], phi: &[f64], y: usize, k: usize) -> Vec<f64> {
    let p = phi.len();
    let mut pr = row_probs(w, phi, k);
    pr[y] -= 1.0;
    let mut g = vec![0.0; k * p];
    for c in 0..k {
        for j in 0..p {
            g[c * p + j] = pr[c] * phi[j];
        }
    }
    g
}

/// Gradient and Hessian of the regularised sum objective over `rows`, where
/// each row carries a multiplicity weight.
fn grad_hess(w: &[f64], data: &ProbeData, weights: &[f64], reg: f64) -> (DVector<f64>, DMatrix<f64>) {
    let k = data.num_classes;
    let dim = data.dim();
    let p = dim / k;
    let mut g = DVector::from_iterator(dim, w.iter().map(|v| reg * v));
    let mut h = DMatrix::<f64>::identity(dim, dim) * reg;
    for ((phi, &y), &m) in data.phi.iter().zip(&data.labels).zip(weights) {
        if m == 0.0 {
            continue;
        }
        let pr = row_probs(w, phi, k);
        for c in 0..k {
            let r = pr[c] - if c == y { 1.0 } else { 0.0 };
            for j in 0..p {
                g[c * p + j] += m * r * phi[j];
            }
        }
        for a in 0..k {
            for b in a..k {
                let s = m * (if a == b { pr[a] } else { 0.0 } - pr[a] * pr[b]);
                if s == 0.0 {
                    continue;
                }
                for i in 0..p {
                    let si = s * phi[i];
                    for j in 0..p {
                        h[(a * p + i, b * p + j)] += si * phi[j];
                    }
                }
            }
        }
    }
    // Mirror the upper block triangle.
    for a in 0..k {
        for b in (a + 1)..k {
            for i in 0..p {
                for j in 0..p {
                    h[(b * p + j, a * p + i)] = h[(a * p + i, b * p + j)];
                }
            }
        }
    }
    (g, h)
}

fn objective(w: &[f64], data: &ProbeData, weights: &[f64], reg: f64) -> f64 {
    let k = data.num_classes;
    data.phi
        .iter()
        .zip(&data.labels)
        .zip(weights)
        .map(|((phi, &y), &m)| if m == 0.0 { 0.0 } else { m * row_loss(w, phi, y, k) })
        .sum::<f64>()
        + 0.5 * reg * w.iter().map(|v| v * v).sum::<f64>()
}

/// Fitted probe parameters (`K x P`, row-major).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub weights: Vec<f64>,
    pub iterations: usize,
}

fn newton(
    data: &ProbeData,
    weights: &[f64],
    reg: f64,
    init: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<ProbeFit> {
    let dim = data.dim();
    let mut w = init.map_or_else(|| vec![0.0; dim], |v| v.to_vec());
    for it in 0..max_iter {
        let (g, h) = grad_hess(&w, data, weights, reg);
        if g.norm() <= tol * (1.0 + data.phi.len() as f64) {
            return Ok(ProbeFit { weights: w, iterations: it });
        }
        let chol = h.cholesky().ok_or_else(|| {
            Error::Numerical("probe Hessian is singular; use a nonzero regularisation strength".into())
        })?;
        let step = chol.solve(&g);
        // Backtracking keeps Newton monotone far from the optimum.
        let f0 = objective(&w, data, weights, reg);
        let slope = -g.dot(&step);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = w.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
            if objective(&cand, data, weights, reg) <= f0 + 1e-4 * t * slope || t < 1e-10 {
                w = cand;
                break;
            }
            t *= 0.5;
        }
    }
    let (g, _) = grad_hess(&w, data, weights, reg);
    if g.norm() <= 1e3 * tol * (1.0 + data.phi.len() as f64) {
        return Ok(ProbeFit { weights: w, iterations: max_iter });
    }
    Err(Error::Numerical(format!("probe Newton did not converge (gradient norm {:.3e})", g.norm())))
}

/// Fits the probe on `train`.
pub fn fit_probe(probe: &ConvexProbe, train: &LabeledDataset) -> Result<ProbeFit> {
    let data = ProbeData::new(probe, train);
    check_regularisation(probe, &data)?;
    newton(&data, &vec![1.0; data.phi.len()], reg_strength(probe, &data), None, probe.tol, probe.max_iter)
}

fn reg_strength(probe: &ConvexProbe, data: &ProbeData) -> f64 {
    probe.lambda * data.phi.len() as f64
}

fn check_regularisation(probe: &ConvexProbe, data: &ProbeData) -> Result<()> {
    if data.phi.is_empty() {
        return Err(Error::Validation("probe needs training data".into()));
    }
    if probe.lambda < 0.0 {
        return Err(Error::Config("probe regularisation must be non-negative".into()));
    }
    Ok(())
}

/// Mean test cross-entropy of a fitted probe.
pub fn probe_test_loss(probe: &ConvexProbe, fit: &ProbeFit, test: &LabeledDataset) -> f64 {
    let data = ProbeData::new(probe, test);
    mean_loss(&fit.weights, &data)
}

fn mean_loss(w: &[f64], data: &ProbeData) -> f64 {
    data.phi.iter().zip(&data.labels).map(|(phi, &y)| row_loss(w, phi, y, data.num_classes)).sum::<f64>()
        / data.phi.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    /// Positive means up-weighting the sample lowers the mean test loss.
    pub scores: Vec<f64>,
    pub positive_fraction: f64,
    pub histogram: Histogram,
}

/// `score(z) = grad L_test^T H^{-1} grad L(z)` at the fitted probe, with `H`
/// the Hessian of the regularised sum objective and `L_test` the mean test loss.
pub fn influence_scores(train: &LabeledDataset, test: &LabeledDataset, probe: &ConvexProbe) -> Result<InfluenceReport> {
    if test.is_empty() {
        return Err(Error::Validation("influence needs a non-empty test set".into()));
    }
    let data = ProbeData::new(probe, train);
    check_regularisation(probe, &data)?;
    let reg = reg_strength(probe, &data);
    let ones = vec![1.0; data.phi.len()];
    let fit = newton(&data, &ones, reg, None, probe.tol, probe.max_iter)?;
    let (_, h) = grad_hess(&fit.weights, &data, &ones, reg);
    let chol = h
        .cholesky()
        .ok_or_else(|| Error::Numerical("probe Hessian is singular; use a nonzero regularisation strength".into()))?;
    let tdata = ProbeData::new(probe, test);
    let mut gt = DVector::zeros(data.dim());
    for (phi, &y) in tdata.phi.iter().zip(&tdata.labels) {
        gt += DVector::from_vec(row_grad(&fit.weights, phi, y, data.num_classes)) / tdata.phi.len() as f64;
    }
    let v = chol.solve(&gt);
    let scores: Vec<f64> = data
        .phi
        .iter()
        .zip(&data.labels)
        .map(|(phi, &y)| v.dot(&DVector::from_vec(row_grad(&fit.weights, phi, y, data.num_classes))))
        .collect();
    let positive_fraction = scores.iter().filter(|s| **s > 0.0).count() as f64 / scores.len() as f64;
    let histogram = Histogram::auto(&scores, 20);
    Ok(InfluenceReport { scores, positive_fraction, histogram })
}

/// Size guard for the leave-one-out oracle.
pub const LOO_MAX_TRAIN: usize = 500;

/// Exact leave-one-out: `delta_i = L_test(w_{-i}) - L_test(w)`, each refit
/// warm-started from the full solution and run to tight convergence.
pub fn loo_oracle(train: &LabeledDataset, test: &LabeledDataset, probe: &ConvexProbe) -> Result<Vec<f64>> {
    if train.len() > LOO_MAX_TRAIN {
        return Err(Error::Config(format!(
            "leave-one-out limited to {LOO_MAX_TRAIN} training samples (got {})",
            train.len()
        )));
    }
    let data = ProbeData::new(probe, train);
    check_regularisation(probe, &data)?;
    let tdata = ProbeData::new(probe, test);
    let reg = reg_strength(probe, &data);
    let n = data.phi.len();
    let full = newton(&data, &vec![1.0; n], reg, None, probe.tol, probe.max_iter)?;
    let base = mean_loss(&full.weights, &tdata);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut m = vec![1.0; n];
            m[i] = 0.0;
            // The regularisation strength stays fixed so only the sample changes.
            let fit = newton(&data, &m, reg, Some(&full.weights), probe.tol, probe.max_iter)?;
            Ok(mean_loss(&fit.weights, &tdata) - base)
        })
        .collect()
}
