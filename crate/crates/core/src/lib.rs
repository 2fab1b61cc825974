//! Benchmark framework for comparing Transformer variants against recurrent,
//! convolutional and classical baselines on univariate price series.

pub mod attention;
pub mod classical;
pub mod data;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tape::{Activation, Tape, Var};
pub use tensor::{Tensor, TensorError};
