//! Anti-personalization of diffusion models, at desk scale.
//!
//! A small conditional denoiser is pretrained on a 2-D Gaussian-mixture
//! "class", personalized to a tight "subject" cluster, and protected
//! against that personalization either by the naive adversarial objective
//! or by pairwise protective preference optimization driven by a
//! look-ahead (dual-path) optimizer.

pub mod checkpoint;
pub mod concepts;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod l2p;
pub mod personalization;
pub mod pretrain;
pub mod protection;
pub mod scenarios;
pub mod trace;

pub use error::{ApdmError, Result};

/// The random stream used throughout; seeded, portable and reproducible.
pub type LabRng = rand_chacha::ChaCha8Rng;
