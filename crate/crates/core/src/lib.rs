//! Category-level 6D object pose estimation from depth images.
//!
//! A one-class Hough forest is trained on depth patches rendered from several
//! instances of a category. Skeleton-derived features (link angles and node
//! offsets) shape the split selection during training only; inference reads
//! depth appearance alone and votes for the object centre and rotation.

pub mod codec;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod forest;
pub mod geometry;
pub mod infer;
pub mod pipeline;
pub mod procgen;
pub mod render;
pub mod skeleton;

pub use config::{PipelineConfig, QualityMask};
