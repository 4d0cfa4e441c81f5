//! Dense tensors, reverse-mode differentiation and the deterministic RNG.

mod kernels;
pub mod ops;
pub mod rng;
pub mod scalar;
mod tensor;

pub use ops::{sigmoid_scalar, SoftmaxMask};
pub use rng::{derive_seed, Rng};
pub use scalar::{DType, Scalar};
pub use tensor::{grad_enabled, no_grad, Tensor};
