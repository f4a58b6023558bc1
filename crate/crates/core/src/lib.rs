//! Sparse recovery toolkit.
//!
//! * [`tensor`]: f64 tensors and a reverse-mode gradient tape
//! * [`sensing`]: sensing operators, k-sparse signals and RIP constants
//! * [`bound_lab`]: numerical checks of the RIP bound on token inner products
//! * [`solvers`]: OMP, ISTA, FISTA and least-squares operator estimation
//! * [`metrics`]: MSE, MAE, RMSE, PSNR, SSIM and FPR
//! * [`model`]: the TRUST reconstructor, a U-Net baseline, losses and training
//! * [`dataset`]: synthetic observation/target pairs and their on-disk format

// `!(x >= 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bound_lab;
pub mod dataset;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sensing;
pub mod solvers;
pub mod tensor;

pub use error::{Error, Result};
