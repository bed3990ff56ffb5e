//! Small conditional diffusion generator over feature vectors.
//!
//! A three-layer SiLU MLP predicts noise from `(x_t, sinusoidal(t), c)`.
//! Sampling and inversion use deterministic DDIM; guided predictions mix the
//! conditional and null-token branches.

mod ddim;
mod denoiser;
mod schedule;
mod token;

pub use ddim::{
    ddim_chain_vjp, ddim_invert, ddim_invert_refined, ddim_invert_steps, ddim_sample, ddim_sample_steps, ddim_sample_traced, ChainTape,
    DEFAULT_INVERSION_REFINEMENT,
};
pub use denoiser::{
    cfg_epsilon, denoising_loss, timestep_encoding, train_denoiser, train_denoiser_from, ClassToken, DenoiserArch,
    DenoiserState, DenoiserTrainConfig, DenoiserTrainLog, EpsTrace,
};
pub use schedule::{forward_noising, NoiseSchedule};
pub use token::{initial_tokens, learn_class_token, token_projection, TokenConfig};
