//! Layers, models, losses, optimizers and gradient checking.

pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod model;
pub mod optim;

pub use gradcheck::{architecture_cases, grad_check, gradcheck_suite, layer_cases, CheckCase, CheckLoss, Coordinate, GradCheckReport, GRADCHECK_TOLERANCE};
pub use layer::{EntryKind, LayerSpec, ParamEntry};
pub use loss::softmax_cross_entropy;
pub use model::{GradientTape, Mode, Model, BN_MOMENTUM};
pub use optim::{adam_step, sgd_momentum_step, OptimizerRule, OptimizerState};
