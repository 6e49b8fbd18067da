//! Minimal dense network substrate: kernels with exact backward passes,
//! a parameter store, plain SGD, and a finite-difference checker.

mod gradcheck;
mod ops;
mod params;

pub use gradcheck::{
    compare_gradients, finite_diff_check, finite_diff_check_piecewise, numeric_gradients_piecewise,
    relative_error, GradCheckReport, Probe, DEFAULT_COORDINATES,
};
pub use ops::{
    relu, relu_backward, sigmoid, sigmoid_backward, softmax_backward_rows, softmax_rows,
    softmax_stable, softplus, LinearGrads, LinearLayer,
};
pub use params::{sgd_step, Param, ParamKind, ParamSpec, ParamStore};
