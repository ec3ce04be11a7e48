//! Dense f64 tensors, sparse matrices, and reverse-mode differentiation.
//!
//! Everything runs in 64-bit floats: the data is desk scale, and double
//! precision is what makes the finite-difference gradient checks tight.

mod dense;
pub mod gradcheck;
pub mod graph;
pub mod sparse;

pub use dense::Tensor;
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
pub use graph::{DiffError, Gradients, Graph, NodeId};
pub use sparse::SparseMatrix;

/// Rows with an L2 norm at or below this are treated as structurally zero:
/// they normalize to the zero row and receive zero gradient. Untouched nodes
/// (users or items with no interactions in a slot) hit this path.
pub const ZERO_ROW_EPS: f64 = 1e-12;
