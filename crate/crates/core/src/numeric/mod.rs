//! Dense tensor arithmetic, reverse-mode differentiation, the loss
//! functions used by every training stage, and a finite-difference oracle.

mod fd;
mod graph;
mod loss;
mod optim;
mod params;
mod tensor;

pub use fd::{finite_difference_grad, max_relative_error, DEFAULT_FD_STEP};
pub use graph::{Gradients, Graph, NodeId};
pub use loss::{
    alt_priming_loss, cross_entropy, cross_entropy_grad, entropy, focal_loss, priming_loss,
    softmax, PrimingLossKind, PROB_FLOOR,
};
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamSet};
pub use tensor::{sample_standard_normal, Tensor};
