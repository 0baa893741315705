//! Tissue detection, annotation consolidation and patch extraction.

mod annotations;
mod patches;
mod prepare;
mod slide;
mod tissue;

pub use annotations::{
    consolidate_annotations, rasterize, AnnotationSet, ConsolidateOptions, LabelRaster, Region,
};
pub use patches::{
    augment_rot90, extract_labeled_patches, extract_unlabeled_patches, grid_count, grid_positions,
    patches_to_tensor, read_manifest, rot90, write_manifest, Patch, PatchKind, PatchSet,
};
pub use prepare::{slide_patches, subsample, PatchPlan};
pub use slide::{Slide, DEFAULT_MICRONS_PER_PIXEL};
pub use tissue::{
    close, dilate, erode, gray_histogram, open, otsu_threshold, tissue_mask, TissueMask, MORPH_RADIUS,
};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("annotation json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("manifest: {0}")]
    Csv(#[from] csv::Error),
    #[error("empty histogram")]
    EmptyHistogram,
    #[error("slide id mismatch: `{0}` vs `{1}`")]
    SlideMismatch(String, String),
    #[error("non-square patch {0}×{1}")]
    NonSquare(usize, usize),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;
