//! Data-independent operators: fixed convolution filters that strip image
//! content and keep generator artifacts, a small trainable head on top, and
//! a synthetic multi-source benchmark for cross-source evaluation.

pub mod classifier;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod io;
pub mod kernel;
pub mod metrics;
mod linalg;
pub mod operators;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use kernel::{Kernel, Provenance};
pub use operators::{build_operator, Extractor, Operator, OperatorSpec};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type KernelF32 = Kernel<f32>;
pub type KernelF64 = Kernel<f64>;
pub type OperatorF32 = Operator<f32>;
pub type OperatorF64 = Operator<f64>;
