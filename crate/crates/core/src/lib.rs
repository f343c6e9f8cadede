//! Keypoint-based lane detection machinery.
//!
//! Everything around the backbone network of a keypoint lane detector:
//!
//! - [`encoder`] turns lane polylines into dense supervision maps,
//! - [`losses`] holds the training losses with analytic gradients,
//!   using [`matcher`] for the matched auxiliary term,
//! - [`lfa`] is the lane-aware deformable feature gather,
//! - [`decoder`] rebuilds lanes from predicted maps by global
//!   starting-point voting,
//! - [`metrics`] scores lane sets with IoU-F1 and row-wise accuracy,
//! - [`synth`] generates seeded scenes and corrupts targets,
//! - [`fit`] optimizes raw prediction maps against the combined loss,
//! - [`tensor`] is the on-disk tensor format used by the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail these checks

pub mod cli;
pub mod decoder;
pub mod domain;
pub mod encoder;
pub mod error;
pub mod fit;
pub mod lfa;
pub mod losses;
pub mod matcher;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use decoder::{AssociationMode, DecodedLaneSet, DecoderConfig};
pub use domain::{Grid, GridSpec, Keypoint, Lane, LaneSet, Scene};
pub use encoder::{encode, EncoderConfig, Targets};
pub use error::{Error, Result};
pub use losses::LossConfig;
