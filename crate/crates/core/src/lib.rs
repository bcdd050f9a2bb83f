//! Evidence-space alignment of medical images and reports when only a small
//! fraction of them is paired.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod evidence;
pub mod model;
pub mod numerics;
pub mod relation;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Graph, Matrix, Var};
