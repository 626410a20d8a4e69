//! Slide tiling, correspondence groups, folds, manifests and synthetic data.

pub mod folds;
pub mod manifest;
pub mod slide;
pub mod store;
pub mod synth;
pub mod tiling;
pub mod tissue;

pub use folds::{split_folds, subsample_fraction, FoldSpec};
pub use manifest::{read_manifest, write_manifest};
pub use slide::{SlideIndex, SlideSource};
pub use store::{load_groups, tile_dataset};
pub use synth::{generate_slide, generate_synthetic_dataset, SynthConfig};
pub use tiling::{render_group, tile_slide, ContextGroup, GroupPixels, PatchPixels, PatchRecord, Role, TilingConfig};
pub use tissue::{compute_tissue_mask, TissueMask};
