//! Saliency-hallucinating two-branch CNN for few-shot fine-grained
//! classification, built on a small dense-tensor reverse-mode core.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pnm;
pub mod rng;
pub mod settings;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
