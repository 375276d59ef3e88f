//! Reverse-mode differentiation and layer kit for the synthaudit pipeline.
//!
//! Models are small convolutional and fully-connected networks over NHWC
//! tensors. Gradients are exact. Group norm is the default normalization;
//! batch norm exists but couples examples, so per-example gradient routines
//! are only meaningful for models without it.

pub mod checkpoint;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod optim;
pub mod seed;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use element::{DType, Element};
pub use error::{NnError, Result};
pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{ConvGeom, Graph, Var};
pub use layers::{ArchitectureDescriptor, BatchStats, Bound, LayerKind, LayerSpec, ParamSet};
pub use model::{
    capture_layer_features, loss_and_grad, per_sample_grad_norms, per_sample_grads, predict,
    predict_with_layers, AttackFeatureBundle, Batch, Forward, GradientBundle, Grads, Mode, Model,
};
pub use optim::{Adam, Optimizer, Sgd};
pub use tensor::Tensor;
