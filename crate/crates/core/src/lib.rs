//! Tensor Gaussian predictive process models: scalable multi-task Gaussian
//! process regression over tensor-shaped outputs and normative modeling on
//! top of it.

pub mod alloc_track;
pub mod dtf;
pub mod error;
pub mod factorization;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod normative;
pub mod optim;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::DenseTensor;

pub type Matrix = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;
