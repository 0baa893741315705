use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    consolidate_annotations, extract_labeled_patches, extract_unlabeled_patches, tissue_mask, AnnotationSet,
    ConsolidateOptions, DataError, PatchSet, Result, Slide,
};

/// Patch geometry and selection rules for one extraction run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchPlan {
    pub patch_size: usize,
    pub labeled_stride: usize,
    pub unlabeled_stride: usize,
    pub purity: f64,
    pub min_tissue: f64,
    pub accept_single: bool,
}

impl Default for PatchPlan {
    fn default() -> Self {
        // 128/20/60 scaled to 32 px patches.
        Self {
            patch_size: 32,
            labeled_stride: 5,
            unlabeled_stride: 15,
            purity: 1.0,
            min_tissue: 0.5,
            accept_single: false,
        }
    }
}

/// Tissue detection, consolidation of the two annotation sets, then
/// labeled and unlabeled extraction: `(labeled, unlabeled)`.
pub fn slide_patches(slide: &Slide, a: &AnnotationSet, b: &AnnotationSet, plan: &PatchPlan) -> Result<(PatchSet, PatchSet)> {
    if a.slide_id != slide.id {
        return Err(DataError::SlideMismatch(slide.id.clone(), a.slide_id.clone()));
    }
    let mask = tissue_mask(slide);
    let opts = ConsolidateOptions {
        accept_single: plan.accept_single,
    };
    let labels = consolidate_annotations(a, b, slide.width, slide.height, opts)?.with_tissue(&mask)?;
    let labeled = extract_labeled_patches(slide, &labels, plan.patch_size, plan.labeled_stride, plan.purity)?;
    let unlabeled = extract_unlabeled_patches(slide, &mask, plan.patch_size, plan.unlabeled_stride, plan.min_tissue)?;
    Ok((labeled, unlabeled))
}

/// Keep `round(fraction · len)` patches (at least one if any), chosen
/// uniformly by `seed`, in their original order.
pub fn subsample(set: &PatchSet, fraction: f64, seed: u64) -> Result<PatchSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = set.len();
    let keep = ((fraction * n as f64).round() as usize).clamp(n.min(1), n);
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, keep).into_vec();
    idx.sort_unstable();
    Ok(PatchSet {
        kind: set.kind,
        patches: idx.into_iter().map(|i| set.patches[i].clone()).collect(),
    })
}
