//! Direct consistency optimization (DCO) of conditional diffusion models at
//! desk scale.
//!
//! The crate bundles a small reverse-mode tensor engine, variance-preserving
//! noise schedules, conditional noise-prediction MLPs, the regular, prior
//! preservation and DCO fine-tuning objectives, LoRA adapters with exact
//! arithmetic merging, guided DDIM sampling, and closed-form Gaussian
//! oracles used to check all of the above.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod oracle;
pub mod process;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
