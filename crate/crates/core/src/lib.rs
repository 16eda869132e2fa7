//! Segmentation engine core.
//!
//! Dense `(N, C, H, W)` tensors with a reverse-mode tape, the U-Net family
//! (plain, conv-in-skip, M-Net, and their attention-gated variants), focal
//! loss and soft Dice, Adam, and a seeded synthetic short-axis phantom
//! generator. Everything here is allocation-only: file formats, the CLI and
//! the HTTP service live in the `vseg` crate.
//!
//! The crate builds without `std` (disable default features); `std` only
//! switches floating point intrinsics and runtime SIMD detection in the
//! matrix kernels.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use crate::autodiff::{Gradients, Tape, Var};
pub use crate::error::{Error, Result};
pub use crate::model::{ModelSpec, ParamSet, Variant};
pub use crate::scalar::{Precision, Scalar};
pub use crate::tensor::{Shape, Tensor};

/// Number of segmentation classes: background, RV, LV, MLV.
pub const NUM_CLASSES: usize = 4;
