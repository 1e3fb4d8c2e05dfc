//! # tvae
//!
//! A self-contained laboratory for turning a miniature sequence-to-sequence
//! Transformer into a variational autoencoder and studying posterior collapse.
//!
//! The crate is organized around six pieces:
//!
//! - [`diffcore`]: a minimal reverse-mode autodiff engine over dense tensors,
//!   generic over `f32` (training) and `f64` (gradient checking).
//! - [`model`]: the encoder–decoder Transformer with a variational bottleneck.
//!   Pooled encoder states are projected to `(mu, log_sigma)`, a latent `z` is
//!   sampled with the reparameterization trick, and `z` is projected into a
//!   single-slot cross-attention memory for every decoder layer.
//! - [`objective`]: ELBO assembly: reconstruction NLL, closed-form Gaussian
//!   KL, per-dimension KL thresholding (free bits), and KL weight schedules.
//! - [`data`]: corpus loading, vocabulary, batching, and token-deletion
//!   denoising.
//! - [`trainer`]: two-phase finetuning with parameter freezing, AdamW, CSV
//!   logging, and bit-exact checkpointing.
//! - [`eval`]: intrinsic metrics: PPL, KL, negative ELBO, mutual information,
//!   and active units.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod trainer;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
