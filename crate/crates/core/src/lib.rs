//! Low-rank Kolmogorov–Arnold segmentation network in pure Rust.
//!
//! The crate is `no_std` (with `alloc`): tensors, reverse-mode autodiff,
//! spline bases, the encoder/decoder model, losses, metrics, cost audit,
//! procedural data and the training loop all run without an OS. File
//! formats and the command line live in the companion `karma` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod audit;
pub mod backbone;
pub mod error;
pub mod gradcheck;
pub mod hash;
pub mod kan;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod lowrank;
pub mod math;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod param;
pub mod spline;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use net::{Model, ModelConfig, Variant};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
