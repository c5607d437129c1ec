//! Dataset schema, on-disk loading, synthetic generation and image-level
//! preprocessing.

mod image;
pub mod loader;
pub mod preprocess;
pub mod synth;
mod types;

pub use image::{BBox, Image};
pub use loader::{load_dataset, save_dataset, validate_root, ValidationReport};
pub use preprocess::{depth_normalize, hha_encode, roi_crop, roi_crop_mask, HhaOutput, Intrinsics};
pub use synth::{synthesize_dataset, SynthConfig, WeightSpacing};
pub use types::*;
