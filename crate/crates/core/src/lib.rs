//! Low-rank adapters with one shared down-projection per input width, routed
//! banks of up-projection experts per layer, and importance-guided selective
//! updates of those experts during training.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file fix the precision for common uses.

pub mod adapter;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod reducer;
pub mod tasks;

pub use error::{Error, Result};
pub use adapter::{AdapterConfig, AdapterState};
pub use model::{Backbone, ModelConfig, TargetModule};
pub use numerics::{no_grad, Rng, Scalar, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type AdapterState64 = AdapterState<f64>;
pub type AdapterState32 = AdapterState<f32>;
pub type Backbone64 = Backbone<f64>;
pub type Backbone32 = Backbone<f32>;
