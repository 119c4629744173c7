//! Area-attention detector toolkit: a small tensor engine with reverse-mode
//! differentiation, attention kernels, detector building blocks, the assembled
//! n/s/m/x model family, and detection training/evaluation.

pub mod attention;
pub mod augment;
pub mod autograd;
pub mod blocks;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod loss;
pub mod model;
pub mod scalar;
pub mod targets;
pub mod tensor;
pub mod train;

pub use attention::{AttentionConfig, CostReport, Kernel, KernelStats};
pub use autograd::{Graph, OpKind, Var};
pub use config::{ModelConfig, Variant};
pub use error::{Error, Result};
pub use model::Model;
pub use scalar::Real;
pub use tensor::Tensor;
