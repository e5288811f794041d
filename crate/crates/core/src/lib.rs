//! Quantization-aware training and packed low-bit inference for graph
//! neural networks.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod infer;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod quant;
pub mod smp;
pub mod tape;
pub mod truncation;

pub use error::{Error, Result};
pub use graph::Graph;
pub use matrix::DenseMatrix;
