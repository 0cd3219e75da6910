//! Tracer-routed PET/CT lesion segmentation toolkit.
//!
//! The pipeline reads co-registered CT and PET (SUV) volumes, classifies the
//! tracer (FDG vs PSMA) from a coronal maximum intensity projection, routes
//! the case to a tracer-specific ensemble of segmentation backends with
//! flip test-time augmentation, and scores masks with Dice plus
//! false-positive / false-negative component volumes.

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod discriminator;
pub mod fusion;
pub mod metrics;
pub mod nifti;
pub mod nn;
pub mod orchestrator;
pub mod preprocess;
pub mod synth;
pub mod volume;

pub use volume::{BinaryMask, Image2D, Volume3D, VolumeError, VolumeKind};
