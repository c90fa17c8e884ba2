//! Small staged CNN classifier with a multi-resolution atrous pyramid (D-SPP)
//! over late-stage feature maps and a spatial attention gate (CID), plus the
//! autodiff, training, evaluation and data tooling around them.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cid;
pub mod config;
pub mod data;
pub mod dspp;
pub mod error;
pub mod eval;
pub mod layer;
pub mod model;
pub mod ops;
pub mod seed;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use model::{ablation_matrix, build_model, AblationConfig, BackboneConfig, Model};
pub use ops::{Activation, Conv2dSpec};
pub use tensor::{grad_check, grad_check_report, GradCheck, Gradients, Graph, Tensor, Var};
