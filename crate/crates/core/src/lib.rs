#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod autodiff;
pub mod error;
pub mod exec;
mod kernels;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use exec::Exec;
pub use optim::{adam_step, AdamState};
pub use params::{ParamId, ParameterSet};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod priors;
pub mod rng;
pub mod trainer;
