//! Desk-scale MoBY self-supervised pre-training.
//!
//! MoBY trains an online encoder against a momentum-updated target encoder
//! with dual key queues and a temperature-scaled contrastive loss, here on a
//! miniature shifted-window transformer backbone small enough to train on a
//! CPU in minutes. The crate carries its own dense-tensor reverse-mode
//! autodiff engine, data pipeline, linear/k-NN evaluation harness, and an
//! experiment runner with bit-exact checkpoint resume.

pub mod backbone;
pub mod dtype;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;

pub use dtype::{Dtype, Scalar};
pub use error::{Error, Result};
pub use tensor::{Gradients, Tensor};
