//! Sliding-window slide prediction and pixel-ratio TC scoring.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::{grid_positions, patches_to_tensor, Patch, Slide, TissueMask};
use crate::models::{ClassLabel, Detector, ModelError, CLASS_COUNT};

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no tumor detected: TC score undefined")]
    NoTumorDetected,
    #[error("{0}")]
    Mismatch(String),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("scores csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, InferenceError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictOptions {
    pub stride: usize,
    /// Windows with a smaller tissue fraction are skipped.
    pub min_tissue: f64,
    /// Windows per forward pass.
    pub batch: usize,
}

impl PredictOptions {
    /// Stride 32 at 128-pixel windows, scaled to the window size.
    pub fn for_window(window: usize) -> Self {
        Self {
            stride: (window / 4).max(1),
            min_tissue: 0.5,
            batch: 64,
        }
    }
}

/// Per-pixel accumulated class distributions over a slide.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub width: usize,
    pub height: usize,
    /// Unnormalized sums, `CLASS_COUNT` per pixel.
    pub sums: Vec<f32>,
    pub counts: Vec<u32>,
    pub tissue: Vec<bool>,
    pub windows: usize,
    /// Set when the slide had no classifiable tissue.
    pub no_tissue: bool,
}

impl ProbabilityMap {
    /// Normalized distribution at a pixel; non-tissue pixels are NON_TISSUE.
    pub fn probs(&self, x: usize, y: usize) -> [f32; CLASS_COUNT] {
        let i = y * self.width + x;
        let mut out = [0.0; CLASS_COUNT];
        if !self.tissue[i] || self.counts[i] == 0 {
            out[ClassLabel::NonTissue.index()] = 1.0;
            return out;
        }
        let c = self.counts[i] as f32;
        for (o, s) in out.iter_mut().zip(&self.sums[i * CLASS_COUNT..(i + 1) * CLASS_COUNT]) {
            *o = s / c;
        }
        out
    }

    /// Overlay with red = P(TC+), green = P(TC−), blue = the rest.
    pub fn overlay_rgb(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.width * self.height * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.probs(x, y);
                let pos = p[ClassLabel::TcPos.index()];
                let neg = p[ClassLabel::TcNeg.index()];
                let other = (1.0 - pos - neg).max(0.0);
                for v in [pos, neg, other] {
                    out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn save_overlay(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.overlay_rgb())
            .ok_or_else(|| InferenceError::Mismatch("overlay extent".into()))?;
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Classify every window holding enough tissue and average the window
/// distributions over each pixel they cover. Tissue pixels no window
/// covers take the distribution of the nearest evaluated window.
pub fn predict_slide(slide: &Slide, mask: &TissueMask, detector: &Detector, opts: PredictOptions) -> Result<ProbabilityMap> {
    let (w, h) = (slide.width, slide.height);
    if mask.width != w || mask.height != h {
        return Err(InferenceError::Mismatch(format!(
            "mask {}×{} vs slide {w}×{h}",
            mask.width, mask.height
        )));
    }
    let win = detector.arch.patch_size;
    let windows = tissue_windows(mask, win, opts.stride, opts.min_tissue);
    let mut map = ProbabilityMap {
        width: w,
        height: h,
        sums: vec![0.0; w * h * CLASS_COUNT],
        counts: vec![0; w * h],
        tissue: mask.data.clone(),
        windows: windows.len(),
        no_tissue: windows.is_empty(),
    };
    if windows.is_empty() {
        return Ok(map);
    }
    let batch = opts.batch.max(1);
    let probs: Vec<Vec<f32>> = windows
        .par_chunks(batch)
        .map(|chunk| -> Result<Vec<f32>> {
            let patches: Vec<Patch> = chunk.iter().map(|&(x, y)| Patch::crop(slide, x, y, win, None)).collect();
            let refs: Vec<&Patch> = patches.iter().collect();
            let t = patches_to_tensor(&refs).map_err(|e| InferenceError::Mismatch(e.to_string()))?;
            Ok(detector.class_probs(&t)?.into_data())
        })
        .collect::<Result<_>>()?;
    let probs: Vec<f32> = probs.concat();

    // Merge in grid order.
    for (k, &(x0, y0)) in windows.iter().enumerate() {
        let p = &probs[k * CLASS_COUNT..(k + 1) * CLASS_COUNT];
        for y in y0..y0 + win {
            for x in x0..x0 + win {
                let i = y * w + x;
                map.counts[i] += 1;
                for (s, v) in map.sums[i * CLASS_COUNT..(i + 1) * CLASS_COUNT].iter_mut().zip(p) {
                    *s += v;
                }
            }
        }
    }

    let half = win as f64 / 2.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask.data[i] || map.counts[i] > 0 {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let nearest = windows
                .iter()
                .enumerate()
                .map(|(k, &(wx, wy))| {
                    let (dx, dy) = (wx as f64 + half - px, wy as f64 + half - py);
                    (k, dx * dx + dy * dy)
                })
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                .0;
            map.counts[i] = 1;
            map.sums[i * CLASS_COUNT..(i + 1) * CLASS_COUNT].copy_from_slice(&probs[nearest * CLASS_COUNT..(nearest + 1) * CLASS_COUNT]);
        }
    }
    Ok(map)
}

/// Grid windows (row-major) with tissue on at least `min_tissue` of their area.
pub fn tissue_windows(mask: &TissueMask, window: usize, stride: usize, min_tissue: f64) -> Vec<(usize, usize)> {
    let w = mask.width;
    // Column prefix sums per row keep this linear in the window count.
    let mut rows = vec![0u32; (w + 1) * mask.height];
    for y in 0..mask.height {
        for x in 0..w {
            rows[y * (w + 1) + x + 1] = rows[y * (w + 1) + x] + mask.data[y * w + x] as u32;
        }
    }
    let need = ((min_tissue * (window * window) as f64).ceil() as u32).max(1);
    let mut out = Vec::new();
    for y0 in grid_positions(mask.height, window, stride) {
        for x0 in grid_positions(w, window, stride) {
            let n: u32 = (y0..y0 + window)
                .map(|y| rows[y * (w + 1) + x0 + window] - rows[y * (w + 1) + x0])
                .sum();
            if n >= need {
                out.push((x0, y0));
            }
        }
    }
    out
}

/// Per-pixel class labels over a slide.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<ClassLabel>,
}

impl ClassMap {
    pub fn new(width: usize, height: usize, labels: Vec<ClassLabel>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(InferenceError::Mismatch(format!(
                "{width}×{height} class map needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        Ok(Self { width, height, labels })
    }

    pub fn get(&self, x: usize, y: usize) -> ClassLabel {
        self.labels[y * self.width + x]
    }

    /// Grayscale PNG holding the class index per pixel.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw = self.labels.iter().map(|l| l.index() as u8).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| InferenceError::Mismatch("class map extent".into()))?;
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        if img.color() != image::ColorType::L8 {
            return Err(InferenceError::Mismatch(format!(
                "{}: class maps are 8-bit grayscale",
                path.display()
            )));
        }
        let img = img.into_luma8();
        let (w, h) = img.dimensions();
        let labels = img
            .into_raw()
            .into_iter()
            .map(|v| {
                ClassLabel::from_index(v as usize)
                    .ok_or_else(|| InferenceError::Mismatch(format!("class index {v} in {}", path.display())))
            })
            .collect::<Result<_>>()?;
        Self::new(w as usize, h as usize, labels)
    }
}

/// Everything derived from one slide by a detector.
#[derive(Clone, Debug)]
pub struct SlidePrediction {
    pub mask: TissueMask,
    pub probs: ProbabilityMap,
    pub classes: ClassMap,
}

impl SlidePrediction {
    pub fn score(&self) -> Result<TcScore> {
        tc_score(&self.classes)
    }
}

/// Tissue detection, sliding-window inference and the per-pixel class map.
pub fn predict(slide: &Slide, detector: &Detector, opts: PredictOptions) -> Result<SlidePrediction> {
    let mask = crate::datapipe::tissue_mask(slide);
    let probs = predict_slide(slide, &mask, detector, opts)?;
    let classes = class_map(&probs);
    Ok(SlidePrediction { mask, probs, classes })
}

/// Per-pixel argmax, ties to the lowest class index.
pub fn class_map(map: &ProbabilityMap) -> ClassMap {
    let mut labels = Vec::with_capacity(map.width * map.height);
    for y in 0..map.height {
        for x in 0..map.width {
            labels.push(argmax(&map.probs(x, y)));
        }
    }
    ClassMap {
        width: map.width,
        height: map.height,
        labels,
    }
}

pub fn argmax(p: &[f32; CLASS_COUNT]) -> ClassLabel {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    ClassLabel::ALL[best]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcScore {
    /// Percent of tumor pixels that are positive.
    pub value: f64,
    pub tc_pos_pixels: u64,
    pub tc_neg_pixels: u64,
}

/// `100·#TC(+) / (#TC(+) + #TC(−))` over the map's pixels.
pub fn tc_score(map: &ClassMap) -> Result<TcScore> {
    let (mut pos, mut neg) = (0u64, 0u64);
    for l in &map.labels {
        match l {
            ClassLabel::TcPos => pos += 1,
            ClassLabel::TcNeg => neg += 1,
            _ => {}
        }
    }
    if pos + neg == 0 {
        return Err(InferenceError::NoTumorDetected);
    }
    Ok(TcScore {
        value: 100.0 * pos as f64 / (pos + neg) as f64,
        tc_pos_pixels: pos,
        tc_neg_pixels: neg,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    slide_id: String,
    score: f64,
    pos_px: u64,
    neg_px: u64,
}

/// Scores CSV: `slide_id,score,pos_px,neg_px`.
pub fn write_scores<W: Write>(w: W, rows: &[(String, TcScore)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for (id, s) in rows {
        w.serialize(ScoreRow {
            slide_id: id.clone(),
            score: s.value,
            pos_px: s.tc_pos_pixels,
            neg_px: s.tc_neg_pixels,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores<R: std::io::Read>(r: R) -> Result<Vec<(String, TcScore)>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| {
            let row: ScoreRow = row?;
            Ok((
                row.slide_id,
                TcScore {
                    value: row.score,
                    tc_pos_pixels: row.pos_px,
                    tc_neg_pixels: row.neg_px,
                },
            ))
        })
        .collect()
}
