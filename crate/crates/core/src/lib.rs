//! Knowledge distillation from a residual teacher CNN into a small
//! convolutional student, with the evaluation and sweep tooling around it.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fsutil;
pub mod gradcheck;
pub mod kv;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod softmax;
pub mod tensor;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use model::{build_dsnet, build_teacher, count_parameters, Model, ModelConfig};
pub use tensor::{RngState, Tensor};
