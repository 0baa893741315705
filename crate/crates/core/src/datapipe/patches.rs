use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::annotations::LabelRaster;
use super::slide::Slide;
use super::tissue::TissueMask;
use super::{DataError, Result};
use crate::models::{ClassLabel, CLASS_COUNT};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchKind {
    Labeled,
    Unlabeled,
}

/// A square RGB crop; `pixels` are interleaved row-major, `size²·3` bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub slide_id: String,
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub label: Option<ClassLabel>,
    pub pixels: Vec<u8>,
}

impl Patch {
    pub fn crop(slide: &Slide, x: usize, y: usize, size: usize, label: Option<ClassLabel>) -> Self {
        let mut pixels = Vec::with_capacity(size * size * 3);
        for row in y..y + size {
            let start = (row * slide.width + x) * 3;
            pixels.extend_from_slice(&slide.pixels[start..start + size * 3]);
        }
        Self {
            slide_id: slide.id.clone(),
            x,
            y,
            width: size,
            height: size,
            label,
            pixels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub kind: PatchKind,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn new(kind: PatchKind) -> Self {
        Self { kind, patches: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn extend(&mut self, other: PatchSet) {
        self.patches.extend(other.patches);
    }

    pub fn class_counts(&self) -> [usize; CLASS_COUNT] {
        let mut c = [0; CLASS_COUNT];
        for p in &self.patches {
            if let Some(l) = p.label {
                c[l.index()] += 1;
            }
        }
        c
    }
}

/// Grid origins along one axis: `0, s, 2s, …` while the patch fits.
pub fn grid_positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    (0..grid_count(extent, patch, stride)).map(|i| i * stride).collect()
}

/// `floor((extent − patch)/stride) + 1`, or 0 when the patch does not fit.
pub fn grid_count(extent: usize, patch: usize, stride: usize) -> usize {
    if patch == 0 || stride == 0 || extent < patch {
        0
    } else {
        (extent - patch) / stride + 1
    }
}

/// Summed-area table with a zero first row and column.
struct Integral {
    w: usize,
    sums: Vec<u32>,
}

impl Integral {
    fn new(width: usize, height: usize, f: impl Fn(usize) -> bool) -> Self {
        let w = width + 1;
        let mut sums = vec![0u32; w * (height + 1)];
        for y in 0..height {
            let mut row = 0u32;
            for x in 0..width {
                row += f(y * width + x) as u32;
                sums[(y + 1) * w + x + 1] = sums[y * w + x + 1] + row;
            }
        }
        Self { w, sums }
    }

    fn window(&self, x: usize, y: usize, size: usize) -> u32 {
        let w = self.w;
        self.sums[(y + size) * w + x + size] + self.sums[y * w + x]
            - self.sums[y * w + x + size]
            - self.sums[(y + size) * w + x]
    }
}

fn check_extent(slide: &Slide, w: usize, h: usize, what: &str) -> Result<()> {
    if slide.width != w || slide.height != h {
        return Err(DataError::Invalid(format!(
            "{what} {w}×{h} does not match slide {}×{}",
            slide.width, slide.height
        )));
    }
    Ok(())
}

/// Grid patches whose pixels carry one label for at least `purity` of the
/// patch area (1.0 = every pixel).
pub fn extract_labeled_patches(
    slide: &Slide,
    labels: &LabelRaster,
    patch: usize,
    stride: usize,
    purity: f64,
) -> Result<PatchSet> {
    check_extent(slide, labels.width, labels.height, "label raster")?;
    if !(0.9..=1.0).contains(&purity) {
        return Err(DataError::Invalid(format!("purity {purity} outside [0.9, 1]")));
    }
    let area = (patch * patch) as f64;
    let need = (purity * area).ceil() as u32;
    let tables: Vec<Integral> = ClassLabel::ALL
        .iter()
        .map(|&c| Integral::new(labels.width, labels.height, |i| labels.labels[i] == Some(c)))
        .collect();
    let mut out = PatchSet::new(PatchKind::Labeled);
    for y in grid_positions(slide.height, patch, stride) {
        for x in grid_positions(slide.width, patch, stride) {
            let hit = ClassLabel::ALL
                .iter()
                .zip(&tables)
                .find(|(_, t)| t.window(x, y, patch) >= need.max(1));
            if let Some((&c, _)) = hit {
                out.patches.push(Patch::crop(slide, x, y, patch, Some(c)));
            }
        }
    }
    Ok(out)
}

/// Grid patches with tissue on at least `min_tissue` of their area.
pub fn extract_unlabeled_patches(
    slide: &Slide,
    mask: &TissueMask,
    patch: usize,
    stride: usize,
    min_tissue: f64,
) -> Result<PatchSet> {
    check_extent(slide, mask.width, mask.height, "tissue mask")?;
    let need = ((min_tissue * (patch * patch) as f64).ceil() as u32).max(1);
    let table = Integral::new(mask.width, mask.height, |i| mask.data[i]);
    let mut out = PatchSet::new(PatchKind::Unlabeled);
    for y in grid_positions(slide.height, patch, stride) {
        for x in grid_positions(slide.width, patch, stride) {
            if table.window(x, y, patch) >= need {
                out.patches.push(Patch::crop(slide, x, y, patch, None));
            }
        }
    }
    Ok(out)
}

/// Rotate a square patch 90° counter-clockwise: output `(x, y)` reads input
/// `(size−1−y, x)`.
pub fn rot90(p: &Patch) -> Result<Patch> {
    if p.width != p.height {
        return Err(DataError::NonSquare(p.width, p.height));
    }
    let s = p.width;
    let mut pixels = vec![0u8; p.pixels.len()];
    for y in 0..s {
        for x in 0..s {
            let src = (x * s + (s - 1 - y)) * 3;
            let dst = (y * s + x) * 3;
            pixels[dst..dst + 3].copy_from_slice(&p.pixels[src..src + 3]);
        }
    }
    Ok(Patch { pixels, ..p.clone() })
}

/// Each patch followed by its 90°, 180° and 270° rotations.
pub fn augment_rot90(set: &PatchSet) -> Result<PatchSet> {
    let mut out = PatchSet {
        kind: set.kind,
        patches: Vec::with_capacity(set.len() * 4),
    };
    for p in &set.patches {
        let mut cur = p.clone();
        out.patches.push(cur.clone());
        for _ in 0..3 {
            cur = rot90(&cur)?;
            out.patches.push(cur.clone());
        }
    }
    Ok(out)
}

/// `N×3×s×s` tensor with bytes mapped to `[−1, 1]`.
pub fn patches_to_tensor(patches: &[&Patch]) -> Result<Tensor> {
    let s = patches.first().map(|p| p.width).unwrap_or(0);
    let plane = s * s;
    let mut data = vec![0.0f32; patches.len() * 3 * plane];
    for (n, p) in patches.iter().enumerate() {
        if p.width != s || p.height != s {
            return Err(DataError::Invalid("patches in a batch must share one size".into()));
        }
        let base = n * 3 * plane;
        for (i, px) in p.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[base + c * plane + i] = px[c] as f32 / 127.5 - 1.0;
            }
        }
    }
    Tensor::new([patches.len(), 3, s, s], data).map_err(|e| DataError::Invalid(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    slide_id: String,
    x: usize,
    y: usize,
    size: usize,
    label: i32,
}

/// Write the CSV manifest and the raw pixel blob in manifest order.
pub fn write_manifest<W: Write, B: Write>(set: &PatchSet, manifest: W, blob: &mut B) -> Result<()> {
    let mut w = csv::Writer::from_writer(manifest);
    for p in &set.patches {
        if p.width != p.height {
            return Err(DataError::NonSquare(p.width, p.height));
        }
        w.serialize(ManifestRow {
            slide_id: p.slide_id.clone(),
            x: p.x,
            y: p.y,
            size: p.width,
            label: p.label.map_or(-1, |l| l.index() as i32),
        })?;
        blob.write_all(&p.pixels)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest<R: Read, B: Read>(manifest: R, blob: &mut B) -> Result<PatchSet> {
    let mut patches = Vec::new();
    let mut labeled = 0usize;
    for row in csv::Reader::from_reader(manifest).deserialize() {
        let row: ManifestRow = row?;
        let label = match row.label {
            -1 => None,
            l => Some(
                ClassLabel::from_index(l as usize)
                    .filter(|_| l >= 0)
                    .ok_or_else(|| DataError::Invalid(format!("label {l} outside [-1, 8)")))?,
            ),
        };
        labeled += label.is_some() as usize;
        let mut pixels = vec![0u8; row.size * row.size * 3];
        blob.read_exact(&mut pixels)?;
        patches.push(Patch {
            slide_id: row.slide_id,
            x: row.x,
            y: row.y,
            width: row.size,
            height: row.size,
            label,
            pixels,
        });
    }
    let kind = match (labeled, patches.len()) {
        (l, n) if l == n && n > 0 => PatchKind::Labeled,
        (0, _) => PatchKind::Unlabeled,
        _ => return Err(DataError::Invalid("manifest mixes labeled and unlabeled patches".into())),
    };
    Ok(PatchSet { kind, patches })
}

/// Manifest plus `<stem>.bin` blob next to it.
impl PatchSet {
    pub fn save(&self, manifest: &Path) -> Result<()> {
        let mut blob = std::io::BufWriter::new(std::fs::File::create(manifest.with_extension("bin"))?);
        write_manifest(self, std::fs::File::create(manifest)?, &mut blob)?;
        blob.flush()?;
        Ok(())
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let mut blob = std::io::BufReader::new(std::fs::File::open(manifest.with_extension("bin"))?);
        read_manifest(std::fs::File::open(manifest)?, &mut blob)
    }
}
