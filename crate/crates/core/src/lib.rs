//! NAKUL: a sequence-modeling block that fuses learnable Gaussian spectral
//! band mixing, input-adaptive multi-scale depthwise kernels, and
//! graph-biased top-k attention across channels, plus the numerics,
//! training loop and tooling needed to verify it.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod dynamic;
pub mod error;
pub mod gradsuite;
pub mod graph;
pub mod model;
pub mod spectral;
pub mod ssm;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{ParamId, ParamStore, Tape, Tensor, Var};
