//! Dense matrices, hand-written layer gradients and optimizers.

pub mod gradcheck;
mod matrix;
pub mod nn;
pub mod optim;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use matrix::Matrix;
pub use nn::{
    linear_forward, mse, relu, relu_backward, softmax, softmax_cross_entropy, HasParams, Linear,
    Parameter,
};
pub use optim::{step, OptimizerKind, OptimizerSpec};
