//! Parameter registry, reverse-mode differentiation, Adam and
//! finite-difference gradient verification shared by every trainable model.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use layers::{BatchNorm, Conv1d, LayerNorm, Linear, Mode};
pub use optim::{adam_step, AdamConfig, OptimizerState, ParameterStore};
pub use params::{Init, ParamEntry, Params};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
pub use train::{apply_gradients, LossCurve, LossRecord};
