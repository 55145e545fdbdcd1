//! Weakly supervised foreground segmentation. A masking network learns to
//! cut objects out of composite images by pasting them onto backgrounds and
//! matching the result, cluster by cluster, to real background-only images
//! under an energy-based sliced Wasserstein divergence.

pub mod checkpoint;
pub mod clustering;
pub mod compositor;
pub mod datagen;
pub mod dataset;
pub mod divergence;
pub mod error;
pub mod evalinfer;
pub mod image;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
