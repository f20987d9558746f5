//! Reverse-mode automatic differentiation sized for this model: dense
//! tensors, a recorded op list, and finite-difference verification.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{gradcheck, gradcheck_sampled, negative_control, GradReport};
pub use tape::{AdError, AdResult, Gradients, NodeId, Tape};
pub use tensor::{Scalar, Tensor};
