//! Speculative-decoding lab.
//!
//! A small decoder-only target transformer, drafters that reuse its hidden
//! states, its key/value cache, or both through a gated fusion, an
//! autoregressive test-time-training loop, a lossless tree verifier and the
//! acceptance metrics used to compare them.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the element type to `f64`, which is what the training
//! loops and the gradient checks use.

pub mod corpus;
pub mod checkpoint;
pub mod drafter;
pub mod metrics;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod specdec;
pub mod tensor;
pub mod ttt;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type TensorF64 = Tensor<f64>;
pub type TensorF32 = Tensor<f32>;
pub type TapeF64 = Tape<f64>;
