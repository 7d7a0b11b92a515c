//! Dense math, a fixed-architecture MLP with exact backpropagation, and SGD.

pub mod checkpoint;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod optim;

pub use gradcheck::{finite_diff_check, FdReport, GradEntry};
pub use matrix::{argmax, dot, log_sum_exp, norm, sigmoid, softmax, softplus, Matrix};
pub use mlp::{Activation, Gradients, Layer, LossHead, Mlp, MlpParams, MlpSpec, SoftmaxCrossEntropy};
pub use optim::{cosine_lr, sgd_step, BatchSchedule, TrainConfig};
