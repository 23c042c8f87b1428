//! Recurrent cross-attention clustering kernels and a hierarchical encoder
//! built on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod cluster;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod oracle;
pub mod params;
pub mod ppm;
pub mod tensor;
pub mod train;
pub mod visualize;

pub use autodiff::{Graph, OpKind, Var};
pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
