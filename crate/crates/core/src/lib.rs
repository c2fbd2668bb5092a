//! Layer-selective language adaptation lab for micro decoder-only transformers.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod lingua;
pub mod model;
pub mod optim;
pub mod plan;
pub mod rank;
pub mod report;
pub mod scalar;
pub mod sweep;
pub mod train;

pub use error::{Error, Result};
pub use model::{Example, Gradients, LoraConfig, Matrix, ModelConfig, ModelState, TrainableSet};
pub use plan::TrainPlan;
