//! Dense feed-forward networks with hand-written reverse mode, plus the two
//! optimisers the pipeline needs.
//!
//! Parameters live in one flat vector so optimisers, checkpoints and
//! finite-difference checks can treat every network uniformly. Layer `l`
//! stores its weight matrix (row-major, `out x in`) followed by its bias.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Activations recorded by a forward pass, consumed by [`Mlp::backward`].
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// `inputs[l]` is the input to layer `l`; the last hidden activation is
    /// `inputs[layers - 1]`.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pub pre: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

impl Mlp {
    /// PyTorch-style uniform initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least an input and an output size");
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] * w[1] + w[1]) {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Self { sizes: sizes.to_vec(), activation, params }
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Self { sizes: sizes.to_vec(), activation, params: vec![0.0; n] }
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Offset of layer `l`'s weight block inside `params`.
    pub fn layer_offset(&self, l: usize) -> usize {
        self.sizes.windows(2).take(l).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn affine(&self, l: usize, x: &[f64], out: &mut Vec<f64>) {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.layer_offset(l);
        let w = &self.params[off..off + n_in * n_out];
        let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
        out.clear();
        out.extend((0..n_out).map(|o| dot(&w[o * n_in..(o + 1) * n_in], x) + b[o]));
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            self.affine(l, &cur, &mut next);
            if l < last {
                next.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    pub fn forward_trace(&self, x: &[f64]) -> (Vec<f64>, Trace) {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut trace = Trace::default();
        let mut cur = x.to_vec();
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let mut z = Vec::new();
            self.affine(l, &cur, &mut z);
            trace.inputs.push(cur);
            if l < last {
                let a = z.iter().map(|v| self.activation.apply(*v)).collect();
                trace.pre.push(z);
                cur = a;
            } else {
                cur = z;
            }
        }
        (cur, trace)
    }

    /// Activations of the last hidden layer (the penultimate representation).
    pub fn penultimate(&self, x: &[f64]) -> Vec<f64> {
        let (_, trace) = self.forward_trace(x);
        trace.inputs.last().unwrap().clone()
    }

    /// Reverse pass from the network output. Accumulates `scale * dL/dparams`
    /// into `param_grad` when given and returns `dL/dinput`.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_out: &[f64],
        param_grad: Option<(&mut [f64], f64)>,
    ) -> Vec<f64> {
        self.backward_from(trace, self.num_layers() - 1, grad_out.to_vec(), param_grad)
    }

    /// Reverse pass given `dL/d(hidden activation h)` where `h` is the output of
    /// hidden layer `hidden` (0-based), i.e. the input to layer `hidden + 1`.
    pub fn backward_from_hidden(
        &self,
        trace: &Trace,
        hidden: usize,
        grad_hidden: &[f64],
        param_grad: Option<(&mut [f64], f64)>,
    ) -> Vec<f64> {
        let g: Vec<f64> = grad_hidden
            .iter()
            .zip(&trace.pre[hidden])
            .map(|(g, z)| g * self.activation.derivative(*z))
            .collect();
        self.backward_from(trace, hidden, g, param_grad)
    }

    /// `grad` is `dL/d(pre-activation output of layer top)`.
    fn backward_from(
        &self,
        trace: &Trace,
        top: usize,
        mut grad: Vec<f64>,
        mut param_grad: Option<(&mut [f64], f64)>,
    ) -> Vec<f64> {
        for l in (0..=top).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.layer_offset(l);
            let input = &trace.inputs[l];
            if let Some((pg, scale)) = param_grad.as_mut() {
                let wg = &mut pg[off..off + n_in * n_out];
                for o in 0..n_out {
                    let go = grad[o] * *scale;
                    if go != 0.0 {
                        for (w, x) in wg[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                            *w += go * x;
                        }
                    }
                }
                let bg = &mut pg[off + n_in * n_out..off + n_in * n_out + n_out];
                for (b, g) in bg.iter_mut().zip(&grad) {
                    *b += g * *scale;
                }
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut gin = vec![0.0; n_in];
            for o in 0..n_out {
                let go = grad[o];
                if go != 0.0 {
                    for (gi, wv) in gin.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *gi += go * wv;
                    }
                }
            }
            if l > 0 {
                for (gi, z) in gin.iter_mut().zip(&trace.pre[l - 1]) {
                    *gi *= self.activation.derivative(*z);
                }
            }
            grad = gin;
        }
        grad
    }
}

/// SGD with heavy-ball momentum and L2 weight decay (PyTorch semantics:
/// `g += wd * p; v = mu * v + g; p -= lr * v`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(n: usize, momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.velocity) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Descent step: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Cosine decay from `lr0` to zero over `total` steps.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn fd_check(act: Activation) {
        let mut r = rng::stream(1, "mlp");
        let net = Mlp::new(&[3, 5, 4, 2], act, &mut r);
        let x = [0.3, -0.7, 1.1];
        let w = [0.5, -1.5];
        let f = |net: &Mlp, x: &[f64]| dot(&net.forward(x), &w);
        let (_, trace) = net.forward_trace(&x);
        let mut pg = vec![0.0; net.num_params()];
        let gx = net.backward(&trace, &w, Some((&mut pg, 1.0)));
        let h = 1e-6;
        for i in 0..net.num_params() {
            let mut p = net.clone();
            p.params[i] += h;
            let up = f(&p, &x);
            p.params[i] -= 2.0 * h;
            let dn = f(&p, &x);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - pg[i]).abs() < 1e-7 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", pg[i]);
        }
        for j in 0..3 {
            let mut xp = x;
            xp[j] += h;
            let up = f(&net, &xp);
            xp[j] -= 2.0 * h;
            let dn = f(&net, &xp);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - gx[j]).abs() < 1e-7 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        fd_check(Activation::Tanh);
        fd_check(Activation::Silu);
    }

    #[test]
    fn hidden_backward_matches_finite_differences() {
        let mut r = rng::stream(2, "mlp");
        let net = Mlp::new(&[2, 6, 3], Activation::Tanh, &mut r);
        let x = [0.4, -0.2];
        let w = [1.0, -2.0, 0.5, 0.25, 3.0, -1.0];
        let (_, trace) = net.forward_trace(&x);
        let gx = net.backward_from_hidden(&trace, 0, &w, None);
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x;
            xp[j] += h;
            let up = dot(&net.penultimate(&xp), &w);
            xp[j] -= 2.0 * h;
            let dn = dot(&net.penultimate(&xp), &w);
            assert!(((up - dn) / (2.0 * h) - gx[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn stable_scalar_functions() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-12);
    }
}
