//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Provides exactly the operation set the model needs: batched matmul,
//! masked softmax, RMS layer norm, elementwise math, axis reductions,
//! reshaping, embedding lookup, and a fused masked cross-entropy. Tensors
//! are immutable after construction except for gradient accumulation;
//! `backward` on a scalar loss populates `grad` on every reachable
//! `requires_grad` tensor.
//!
//! Everything is generic over [`Element`]: `f32` is the training precision,
//! `f64` the gradient-checking precision (central differences are unreliable
//! at `f32`).

mod element;
mod gradcheck;
mod mask;
pub mod rng;
mod tensor;

pub use element::Element;
pub use gradcheck::{grad_check, GradCheckReport};
pub use mask::BoolMask;
pub use rng::Rng;
pub use tensor::{no_grad, Tensor};
