//! Minimal reverse-mode differentiation engine and SGD optimizer.

mod check;
mod ops;
mod optim;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_masked};
pub use ops::{
    argmax, cross_entropy, cross_entropy_per_sample, kl_divergence, log_softmax_rows, softmax,
    LossValue,
};
pub use optim::{sgd_step, Sgd, SgdConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
