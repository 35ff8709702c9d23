//! Desk-scale multi-task, multi-modal masked flow-matching video generation.

pub mod backbone;
pub mod cdca;
pub mod error;
pub mod exec;
pub mod graph;
pub mod harness;
pub mod modal_features;
pub mod nn;
pub mod phda;
pub mod sampler;
pub mod task_masking;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
