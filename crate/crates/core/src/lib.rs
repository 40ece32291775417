//! Desk-scale federated learning with feature decoupling and calibration.
//!
//! This crate holds everything that is pure computation: a dense tensor type
//! with reverse-mode autodiff, the differentiable primitives needed by a small
//! convolutional model, the decoupler/corrector modules and their losses, the
//! domain-aware aggregation math, synthetic multi-domain data generation, and
//! evaluation metrics. It is `no_std` (alloc required); IO, file formats, the
//! CLI, and client-level parallelism live in the companion `f2dc-sim` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod batchnorm;
pub mod conv;
pub mod data;
pub mod dfc;
pub mod dfd;
pub mod error;
pub mod eval;
pub mod federation;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod optim;
pub mod real;
pub mod rng;
pub mod spectrum;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
