use super::denoiser::{cfg_epsilon, DenoiserState, EpsTrace};
use super::schedule::NoiseSchedule;
use crate::error::Result;

/// Coefficients of one deterministic update `x_to = a x_from + b eps_hat`.
fn step_coefficients(sched: &NoiseSchedule, from: usize, to: usize) -> (f64, f64) {
    let af = sched.alpha_bar_at(from);
    let at = sched.alpha_bar_at(to);
    let a = (at / af).sqrt();
    let b = (1.0 - at).sqrt() - (at * (1.0 - af) / af).sqrt();
    (a, b)
}

/// Pairs `(t, s)` visited by sampling, from high to low noise; `s = 0` last.
fn sampling_pairs(seq: &[usize]) -> Vec<(usize, usize)> {
    (0..seq.len()).rev().map(|i| (seq[i], if i == 0 { 0 } else { seq[i - 1] })).collect()
}

/// Deterministic (eta = 0) DDIM over every training timestep.
pub fn ddim_sample(eps_t: &[f64], cond: &[f64], omega: f64, sched: &NoiseSchedule, state: &DenoiserState) -> Vec<f64> {
    ddim_sample_steps(eps_t, cond, omega, sched, state, sched.steps()).expect("full schedule is a valid subsequence")
}

/// DDIM over an evenly spaced subsequence of `steps` timesteps.
pub fn ddim_sample_steps(
    eps_t: &[f64],
    cond: &[f64],
    omega: f64,
    sched: &NoiseSchedule,
    state: &DenoiserState,
    steps: usize,
) -> Result<Vec<f64>> {
    let seq = sched.subsequence(steps)?;
    let mut x = eps_t.to_vec();
    for (t, s) in sampling_pairs(&seq) {
        let e = cfg_epsilon(&x, t, cond, omega, state);
        let (a, b) = step_coefficients(sched, t, s);
        x.iter_mut().zip(&e).for_each(|(xi, ei)| *xi = a * *xi + b * ei);
    }
    Ok(x)
}

/// Reverse-time DDIM: runs the update from `x_0` up to `x_T`, predicting the
/// noise at each target timestep from the current (lower-noise) iterate.
pub fn ddim_invert(x0: &[f64], cond: &[f64], omega: f64, sched: &NoiseSchedule, state: &DenoiserState) -> Vec<f64> {
    ddim_invert_steps(x0, cond, omega, sched, state, sched.steps()).expect("full schedule is a valid subsequence")
}

pub fn ddim_invert_steps(
    x0: &[f64],
    cond: &[f64],
    omega: f64,
    sched: &NoiseSchedule,
    state: &DenoiserState,
    steps: usize,
) -> Result<Vec<f64>> {
    ddim_invert_refined(x0, cond, omega, sched, state, steps, DEFAULT_INVERSION_REFINEMENT)
}

/// Fixed-point refinements applied per inversion step by [`ddim_invert`].
pub const DEFAULT_INVERSION_REFINEMENT: usize = 2;

/// Inversion where each step's naive estimate `x_t` is refined `refine`
/// times by the fixed-point iteration `x_t <- (x_s - b eps(x_t, t)) / a`,
/// which makes the step an exact inverse of the sampling step at convergence.
/// `refine = 0` is the plain reverse-time update.
pub fn ddim_invert_refined(
    x0: &[f64],
    cond: &[f64],
    omega: f64,
    sched: &NoiseSchedule,
    state: &DenoiserState,
    steps: usize,
    refine: usize,
) -> Result<Vec<f64>> {
    let seq = sched.subsequence(steps)?;
    let mut x = x0.to_vec();
    let mut prev = 0;
    for &t in &seq {
        let xs = x.clone();
        let e = cfg_epsilon(&xs, t, cond, omega, state);
        let (a, b) = step_coefficients(sched, prev, t);
        x.iter_mut().zip(&e).for_each(|(xi, ei)| *xi = a * *xi + b * ei);
        if refine > 0 {
            // Coefficients of the sampling step t -> prev.
            let (sa, sb) = step_coefficients(sched, t, prev);
            for _ in 0..refine {
                let e = cfg_epsilon(&x, t, cond, omega, state);
                for i in 0..x.len() {
                    x[i] = (xs[i] - sb * e[i]) / sa;
                }
            }
        }
        prev = t;
    }
    Ok(x)
}

struct StepRecord {
    a: f64,
    b: f64,
    uncond: Option<EpsTrace>,
    cond: Option<EpsTrace>,
}

/// Record of a sampling chain for reverse-mode differentiation.
pub struct ChainTape {
    omega: f64,
    records: Vec<StepRecord>,
}

/// Same output as [`ddim_sample_steps`], keeping what the VJP needs.
pub fn ddim_sample_traced(
    eps_t: &[f64],
    cond: &[f64],
    omega: f64,
    sched: &NoiseSchedule,
    state: &DenoiserState,
    steps: usize,
) -> Result<(Vec<f64>, ChainTape)> {
    let seq = sched.subsequence(steps)?;
    let mut x = eps_t.to_vec();
    let mut records = Vec::with_capacity(seq.len());
    for (t, s) in sampling_pairs(&seq) {
        let (a, b) = step_coefficients(sched, t, s);
        let (uncond, eu) = if omega != 1.0 {
            let (e, tr) = state.epsilon_traced(&x, t, &state.null_token);
            (Some(tr), Some(e))
        } else {
            (None, None)
        };
        let (condt, ec) = if omega != 0.0 {
            let (e, tr) = state.epsilon_traced(&x, t, cond);
            (Some(tr), Some(e))
        } else {
            (None, None)
        };
        for i in 0..x.len() {
            let e = match (&eu, &ec) {
                (Some(u), Some(c)) => (1.0 - omega) * u[i] + omega * c[i],
                (Some(u), None) => u[i],
                (None, Some(c)) => c[i],
                (None, None) => unreachable!(),
            };
            x[i] = a * x[i] + b * e;
        }
        records.push(StepRecord { a, b, uncond, cond: condt });
    }
    Ok((x, ChainTape { omega, records }))
}

/// Pulls `dL/dx_0` back through the chain to `(dL/d eps_T, dL/d cond)`.
pub fn ddim_chain_vjp(tape: &ChainTape, state: &DenoiserState, grad_x0: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut g = grad_x0.to_vec();
    let mut gc = vec![0.0; state.cond_dim()];
    for rec in tape.records.iter().rev() {
        let mut gx: Vec<f64> = g.iter().map(|v| rec.a * v).collect();
        if let Some(tr) = &rec.uncond {
            let w = if rec.cond.is_some() { 1.0 - tape.omega } else { 1.0 };
            let ge: Vec<f64> = g.iter().map(|v| rec.b * w * v).collect();
            let (dx, _) = state.epsilon_vjp(tr, &ge, None);
            gx.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        }
        if let Some(tr) = &rec.cond {
            let w = if rec.uncond.is_some() { tape.omega } else { 1.0 };
            let ge: Vec<f64> = g.iter().map(|v| rec.b * w * v).collect();
            let (dx, dc) = state.epsilon_vjp(tr, &ge, None);
            gx.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
            gc.iter_mut().zip(&dc).for_each(|(a, b)| *a += b);
        }
        g = gx;
    }
    (g, gc)
}
