//! Multimodal fusion of gene-expression vectors and whole-slide patch
//! embeddings, built on a small reverse-mode autodiff substrate.

pub mod error;
pub mod aggregator;
pub mod attention;
pub mod gradcheck;
pub mod gene;
pub mod mpm;
pub mod nystrom;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, TensorId};
pub use tensor::DiffTensor;
