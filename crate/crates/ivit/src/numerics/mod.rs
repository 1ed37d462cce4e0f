//! From-scratch numeric core: `f64` tensors, a reverse-mode autodiff tape,
//! and a finite-difference gradient checker.
//!
//! No external linear algebra or ML dependency is involved; every kernel and
//! every backward formula lives in this module and is validated against
//! central finite differences (see [`gradcheck`]).

pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::{check_graph_op, GradCheckReport};
pub use graph::{Gradients, Graph};
pub use tensor::Tensor;
