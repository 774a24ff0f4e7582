//! Loop closure detection for multibeam sonar from the structural similarity
//! of submap feature distributions.
//!
//! The pipeline: dead-reckoned poses ([`dead_reckoning`]) place sonar pings
//! into local submaps ([`submap`]), each submap is summarised by six
//! per-point feature maps ([`features`]), and pairs of submaps whose
//! similarity exceeds a threshold are reported as loops ([`detector`]).
//! [`evaluation`] scores detections against ground truth, [`synth`]
//! produces simulated missions and [`io`] reads and writes the dataset
//! layout.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod dead_reckoning;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod submap;
pub mod synth;

pub use error::{Error, Result};

/// The linear algebra crate used throughout the public API.
pub use nalgebra;
