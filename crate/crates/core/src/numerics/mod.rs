//! Dense matrices, reverse-mode differentiation and gradient checking.

pub mod autodiff;
pub mod gradcheck;
pub mod matrix;

pub use autodiff::{softmax_row, DiffNode, Graph, Var};
pub use gradcheck::{check_gradients, check_gradients_with, GradCheckOptions, GradCheckReport};
pub use matrix::{cosine, cosine_rows, dot, norm, Matrix, NORM_EPS};

/// Smoothing constant inside the KL logarithms.
pub const KL_EPS: f64 = 1e-12;
