//! Small fixed-op neural network toolkit: NHWC tensors, layers with hand-written backward passes,
//! loss primitives, Adam with polynomial learning-rate decay, a finite-difference gradient checker
//! and a binary checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use gradcheck::{grad_check, max_relative_error, numeric_gradient};
pub use layers::{concat_channels, split_channels, BatchNorm, Conv2d, Dense, MaxPool2, Mode, Relu, Tanh};
pub use loss::{smooth_l1, smooth_l1_grad, softmax_cross_entropy, CrossEntropy};
pub use optim::{Adam, LrSchedule};
pub use tensor::{gemm, params_mut, zero_grads, HasParams, Param, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Usage(String),
}
