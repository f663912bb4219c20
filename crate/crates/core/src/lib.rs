//! Human-motion prior maps from semantic grid maps.
//!
//! The crate predicts where pedestrians walk (occupancy), where they stop and
//! how fast they move from a 13-class semantic map, using a vision-transformer
//! autoencoder with optional random patch masking. It bundles everything the
//! pipeline needs: a small reverse-mode autodiff tensor library, map and
//! trajectory preprocessing, the model, the training loop with leave-one-out
//! cross-validation, full-map inference and the evaluation metrics
//! (forward/reverse KL and Earth Mover's Distance).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod ingest;
pub mod mapgrid;
pub mod metrics;
pub mod model;
pub mod scenes;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
