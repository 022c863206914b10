//! E-FPN semantic segmentation: a dual-pathway feature pyramid built from
//! depth-wise separable multi-scale blocks, together with the class
//! decomposition, balanced augmentation, training, and evaluation tooling
//! needed to train it on heavily imbalanced defect datasets.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod imbalance;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use mask::IndexMask;
pub use model::{EfpnConfig, EfpnModel};
pub use tensor::{Shape, Tape, Tensor, Var};
