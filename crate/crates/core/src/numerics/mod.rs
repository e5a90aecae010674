//! Dense tensors, a reverse-mode tape, and finite-difference oracles.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_diff, finite_diff_piecewise, finite_diff_piecewise_with, max_rel_error, rel_error, stencil_noise, FdSteps, Probe,
};
pub use tape::{smooth_l1, Tape, Var, LOG_CLAMP};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
