use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tissue::TissueMask;
use super::{DataError, Result};
use crate::models::ClassLabel;

/// One annotated polygon. Vertices are in pixel coordinates, pixel `(x, y)`
/// covering `[x, x+1) × [y, y+1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub label: ClassLabel,
    pub polygon: Vec<[f64; 2]>,
}

/// The regions one rater drew on one slide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSet {
    pub slide_id: String,
    pub rater_id: String,
    pub regions: Vec<Region>,
}

impl AnnotationSet {
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.regions.iter().enumerate() {
            if r.polygon.len() < 3 {
                return Err(DataError::Invalid(format!("region {i}: fewer than 3 vertices")));
            }
            if r.label == ClassLabel::NonTissue {
                return Err(DataError::Invalid(format!("region {i}: NON_TISSUE is derived, not annotated")));
            }
            if r.polygon.iter().flatten().any(|v| !v.is_finite()) {
                return Err(DataError::Invalid(format!("region {i}: non-finite vertex")));
            }
            if !is_simple(&r.polygon) {
                return Err(DataError::Invalid(format!("region {i}: polygon self-intersects")));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let set: Self = serde_json::from_str(s)?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_meet(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// No two non-adjacent edges meet.
fn is_simple(poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_meet(a, b, poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

const NONE: u8 = u8::MAX;
const CONFLICT: u8 = u8::MAX - 1;

/// Per-pixel label codes for one rater: a class index, `NONE`, or
/// `CONFLICT` where the rater's own regions disagree.
fn raster_codes(set: &AnnotationSet, width: usize, height: usize) -> Vec<u8> {
    let mut codes = vec![NONE; width * height];
    let mut crossings = Vec::new();
    for region in &set.regions {
        let code = region.label.index() as u8;
        let poly = &region.polygon;
        let n = poly.len();
        for y in 0..height {
            let py = y as f64 + 0.5;
            crossings.clear();
            for i in 0..n {
                let (a, b) = (poly[i], poly[(i + n - 1) % n]);
                if (a[1] > py) != (b[1] > py) {
                    crossings.push(a[0] + (py - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
                }
            }
            crossings.sort_by(|a, b| a.total_cmp(b));
            // Even-odd rule: a pixel centre is inside when an odd number of
            // crossings lie strictly to its right.
            for pair in crossings.chunks_exact(2) {
                let x0 = (pair[0] - 0.5).floor().max(0.0) as usize;
                for x in x0..width {
                    let px = x as f64 + 0.5;
                    if px >= pair[1] {
                        break;
                    }
                    if px < pair[0] {
                        continue;
                    }
                    let c = &mut codes[y * width + x];
                    if *c == NONE {
                        *c = code;
                    } else if *c != code {
                        *c = CONFLICT;
                    }
                }
            }
        }
    }
    codes
}

/// Per-pixel class labels; `None` marks unlabeled or discarded pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRaster {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<Option<ClassLabel>>,
}

impl LabelRaster {
    pub fn new(width: usize, height: usize, labels: Vec<Option<ClassLabel>>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(DataError::Invalid(format!(
                "{width}×{height} raster needs {} cells, got {}",
                width * height,
                labels.len()
            )));
        }
        Ok(Self { width, height, labels })
    }

    pub fn get(&self, x: usize, y: usize) -> Option<ClassLabel> {
        self.labels[y * self.width + x]
    }

    pub fn count(&self, label: ClassLabel) -> usize {
        self.labels.iter().filter(|&&l| l == Some(label)).count()
    }

    pub fn labeled(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// Pixels outside the tissue mask become NON_TISSUE, overriding any
    /// annotation that spills onto background.
    pub fn with_tissue(&self, mask: &TissueMask) -> Result<Self> {
        if mask.width != self.width || mask.height != self.height {
            return Err(DataError::Invalid(format!(
                "mask {}×{} does not match raster {}×{}",
                mask.width, mask.height, self.width, self.height
            )));
        }
        let labels = self
            .labels
            .iter()
            .zip(&mask.data)
            .map(|(&l, &t)| if t { l } else { Some(ClassLabel::NonTissue) })
            .collect();
        Ok(Self {
            width: self.width,
            height: self.height,
            labels,
        })
    }
}

/// One rater's raster. Pixels where the rater's own regions disagree are
/// `None`.
pub fn rasterize(set: &AnnotationSet, width: usize, height: usize) -> LabelRaster {
    LabelRaster {
        width,
        height,
        labels: raster_codes(set, width, height).into_iter().map(decode).collect(),
    }
}

fn decode(c: u8) -> Option<ClassLabel> {
    if c >= CONFLICT {
        None
    } else {
        ClassLabel::from_index(c as usize)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConsolidateOptions {
    /// Keep pixels annotated by only one rater.
    pub accept_single: bool,
}

/// Concordant labels of two raters: `L` where both assign `L`, `None` where
/// they disagree, and `None` for single-rater pixels unless accepted.
pub fn consolidate_annotations(
    a: &AnnotationSet,
    b: &AnnotationSet,
    width: usize,
    height: usize,
    opts: ConsolidateOptions,
) -> Result<LabelRaster> {
    if a.slide_id != b.slide_id {
        return Err(DataError::SlideMismatch(a.slide_id.clone(), b.slide_id.clone()));
    }
    a.validate()?;
    b.validate()?;
    let ra = raster_codes(a, width, height);
    let rb = raster_codes(b, width, height);
    let labels = ra
        .iter()
        .zip(&rb)
        .map(|(&x, &y)| match (x, y) {
            (NONE, NONE) => None,
            (NONE, c) | (c, NONE) if opts.accept_single => decode(c),
            (x, y) if x == y => decode(x),
            _ => None,
        })
        .collect();
    Ok(LabelRaster { width, height, labels })
}
