//! Orthogonal convolution regularization built on the doubly block-Toeplitz
//! (DBT) view of a convolutional layer.
//!
//! The [`dbt`] module materializes the layer as a sparse matrix and serves as
//! ground truth; [`orthreg`] implements the self-convolution regularizers that
//! avoid building it; [`spectrum`] measures the resulting singular values.

pub mod cli;
pub mod conv;
pub mod dbt;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod oracle;
pub mod orthreg;
pub mod spectrum;
pub mod tensor;
pub mod trainer;

pub use conv::ConvGeometry;
pub use dbt::{DbtMatrix, DenseMatrix};
pub use error::{Error, Result};
pub use tensor::{KernelTensor, Rng, Tensor};
