//! Testis volumetry from DIXON MRI.
//!
//! The pipeline reads three-channel NIfTI volumes, excludes subjects that do
//! not meet the window specification, runs a 2D segmentation model slice by
//! slice, restacks the logits into a 3D mask, zeroes masks that touch the
//! window boundary and reports volumes in mL together with dice agreement
//! and population statistics.

pub mod cohort;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod popstats;
pub mod postprocess;
pub mod preprocess;

pub use error::{Error, Result};
