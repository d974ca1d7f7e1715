//! Retinal-image T2D screening pipeline at desk scale.
//!
//! Synthetic cohorts with a planted biomarker signal, the preprocessing and
//! augmentation chain, a small multi-target CNN with exact gradients, Adam
//! training on balanced batches, test-time-augmentation uncertainty with
//! referral curves, and individual-level aggregation of image predictions.

pub mod aggregate;
pub mod augment;
pub mod data_model;
pub mod error;
pub mod image;
pub mod io;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod seeding;
pub mod synthgen;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use image::ImageTensor;
