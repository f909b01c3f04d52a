//! Small CPU tensor engine: dense arrays, a tape-based reverse-mode
//! autodiff graph, and the kernel set needed for convolutional and
//! attention models. Kernels run data-parallel over disjoint output chunks
//! with a fixed inner reduction order, so the parallel and sequential
//! paths agree bitwise; see [`parallel`].

pub mod array;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod parallel;
pub mod scalar;

pub use array::Array;
pub use error::{Result, TensorError};
pub use graph::{Graph, Tensor};
pub use scalar::{Dtype, Scalar};
