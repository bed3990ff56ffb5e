//! Utility-centric generative data augmentation on feature-vector tasks.
//!
//! The crate is organised around the feedback loop that turns a downstream
//! classifier into a signal for a small conditional diffusion generator:
//!
//! * [`data`] builds mixture-of-subpopulation toy tasks and persists datasets.
//! * [`diffusion`] holds the noise schedule, the conditional denoiser, DDIM
//!   sampling/inversion with classifier-free guidance, and class-token learning.
//! * [`classifier`] is the downstream model, trained with per-sample weights.
//! * [`todv`] meta-learns the loss-conditioned weight network.
//! * [`mlco`] fine-tunes the denoiser with preference pairs ranked by utility.
//! * [`ilpo`] optimises condition embeddings and initial noise per instance.
//! * [`analysis`] covers influence scores, diversity, and weight distributions.

pub mod analysis;
pub mod classifier;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod ilpo;
pub mod mlco;
pub mod nn;
pub mod rng;
pub mod todv;

pub use error::{Error, Result};
