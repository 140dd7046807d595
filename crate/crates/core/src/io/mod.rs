//! On-disk formats: the ASDM1 checkpoint container, the JSON run
//! configuration and the grayscale preview image.

mod checkpoint;
mod config;
mod image;

pub use checkpoint::{Checkpoint, InventoryEntry, ModelKind, DTYPE_F64, FORMAT_VERSION, MAGIC};
pub use config::{
    DistillConfig, PlanChoice, RunConfig, SamplerConfig, SegmentConfig, TeacherStageConfig,
};
pub use image::{latent_bytes, preview_pgm};
