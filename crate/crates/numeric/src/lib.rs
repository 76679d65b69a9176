//! Minimal dense-tensor engine: f64 tensors, reverse-mode autodiff, AdamW,
//! and a seedable PRNG. Single-threaded graph construction; kernels may use
//! rayon internally with bitwise-deterministic reduction order.

mod error;
mod kernels;
pub mod ops;
pub mod optim;
pub mod rng;
mod tensor;

pub use error::{NumericError, Result};
pub use optim::{zero_grads, AdamW, AdamWConfig};
pub use rng::Rng;
pub use tensor::{backward, Tensor};
