//! Early-exit enhanced patch classification: a self-contained engine that
//! builds, trains, splits, and benchmarks a small high-precision CNN for
//! single-object detection on 32x32 RGB patches.

pub mod augment;
pub mod bench;
pub mod cascade;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod weights_io;

pub use error::{Error, Result};
pub use tensor::Tensor;
