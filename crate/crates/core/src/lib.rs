//! Two-stage human de-occlusion.
//!
//! Stage one refines an inaccurate visible-region mask and completes it to
//! the full (amodal) silhouette; stage two paints the hidden appearance with
//! a partial-convolution U-Net steered by body-part parsing.
//!
//! * [`datagen`] synthesizes occlusion samples with exact ground truth.
//! * [`maskcomp`] is stage one, [`recovery`] stage two.
//! * [`losses`] and [`evalkit`] hold the objectives and metrics.
//! * [`harness`] drives training, evaluation, inference and ablations.

pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod harness;
pub mod losses;
pub mod maskcomp;
mod nn;
pub mod recovery;
pub mod types;

pub use error::{Error, Result};
pub use nn::PatchDiscriminator;
pub use types::{binarize, stack, BinaryMask, ImageTensor, ParsingLogits};
