//! Synchronous data-, model- and hybrid-parallel training of small
//! convolutional networks over simulated devices, plus an analytic
//! training-time cost model.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`kernels`], [`sgd`], [`rng`]: numerics on `f64` tensors;
//!   [`gradcheck`] verifies the backward kernels numerically.
//! - [`netdef`]: network descriptions, shape inference and column partitioning.
//! - [`model`]: parameters and the single-device reference executor.
//! - [`fabric`]: simulated devices exchanging messages with byte accounting.
//! - [`schemes`]: parallel training steps on top of the fabric.
//! - [`costmodel`]: per-step and per-run time estimates and calibration.
//! - [`trainer`]: synthetic data, training loops and metric output.
//! - [`cli`]: the `parconv` command-line front end.

pub mod cli;
pub mod costmodel;
pub mod error;
pub mod fabric;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod netdef;
pub mod rng;
pub mod schemes;
pub mod sgd;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
