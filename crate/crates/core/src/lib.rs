//! Boundary-guided context aggregation for semantic segmentation, desk scale.
//!
//! The crate is self-contained and sans-IO: a dense f64 tensor engine with
//! reverse-mode autodiff ([`tensor`]), the segmentation network with its
//! multi-scale boundary extractor and boundary-guided cross-attention
//! ([`model`]), training objectives ([`loss`]), a procedural scene generator
//! with exact boundary ground truth ([`data`]), evaluation metrics
//! ([`metrics`]), and an SGD trainer with a polynomial learning-rate schedule
//! ([`train`]). File formats and the CLI live in the companion `bcanet`
//! crate.
//!
//! Everything is deterministic: a config plus a seed reproduces training
//! bit for bit.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
mod fmath;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
