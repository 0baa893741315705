use super::slide::Slide;
use super::{DataError, Result};

/// Structuring-element radius for tissue-mask morphology.
pub const MORPH_RADIUS: usize = 2;

/// Boolean raster; `true` marks tissue.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl TissueMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(DataError::Invalid(format!(
                "{width}×{height} mask needs {} cells, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    /// Grayscale PNG, 255 = tissue.
    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        let raw = self.data.iter().map(|&t| if t { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| DataError::Invalid("mask buffer does not match extent".into()))?;
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

pub fn gray_histogram(gray: &[u8]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &g in gray {
        h[g as usize] += 1;
    }
    h
}

/// Otsu's threshold. The split at `t` puts intensities `< t` in the dark
/// class. Candidates run from the smallest to the largest occupied bin, so
/// a single-spike histogram returns that intensity; ties go to the
/// smallest `t`.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8> {
    let lo = hist.iter().position(|&c| c > 0).ok_or(DataError::EmptyHistogram)?;
    let hi = hist.iter().rposition(|&c| c > 0).unwrap_or(lo);
    let n: i128 = hist.iter().map(|&c| c as i128).sum();
    let s: i128 = hist.iter().enumerate().map(|(i, &c)| i as i128 * c as i128).sum();

    // Between-class variance times n² is (n·s0 − n0·s)² / (n0·n1); compared
    // as exact fractions while the products fit, in f64 otherwise.
    let mut best_t = lo;
    let mut best: (i128, i128) = (0, 1);
    let (mut n0, mut s0) = (0i128, 0i128);
    for t in lo..=hi {
        if t > 0 {
            n0 += hist[t - 1] as i128;
            s0 += (t as i128 - 1) * hist[t - 1] as i128;
        }
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = n * s0 - n0 * s;
        let cand = (d * d, n0 * n1);
        if greater(cand, best) {
            best = cand;
            best_t = t;
        }
    }
    Ok(best_t as u8)
}

fn greater(a: (i128, i128), b: (i128, i128)) -> bool {
    match (a.0.checked_mul(b.1), b.0.checked_mul(a.1)) {
        (Some(l), Some(r)) => l > r,
        _ => a.0 as f64 / a.1 as f64 > b.0 as f64 / b.1 as f64,
    }
}

fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Out-of-bounds neighbours are ignored by both erosion and dilation, which
/// keeps the pair adjoint (and opening/closing idempotent).
fn morph(mask: &TissueMask, radius: usize, erode: bool) -> TissueMask {
    let offs = disk_offsets(radius);
    let (w, h) = (mask.width as isize, mask.height as isize);
    let mut out = vec![false; mask.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = erode;
            for &(dx, dy) in &offs {
                let (xx, yy) = (x + dx, y + dy);
                if xx < 0 || yy < 0 || xx >= w || yy >= h {
                    continue;
                }
                let v = mask.data[(yy * w + xx) as usize];
                if erode && !v {
                    acc = false;
                    break;
                }
                if !erode && v {
                    acc = true;
                    break;
                }
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    TissueMask {
        width: mask.width,
        height: mask.height,
        data: out,
    }
}

pub fn erode(mask: &TissueMask, radius: usize) -> TissueMask {
    morph(mask, radius, true)
}

pub fn dilate(mask: &TissueMask, radius: usize) -> TissueMask {
    morph(mask, radius, false)
}

pub fn open(mask: &TissueMask, radius: usize) -> TissueMask {
    dilate(&erode(mask, radius), radius)
}

pub fn close(mask: &TissueMask, radius: usize) -> TissueMask {
    erode(&dilate(mask, radius), radius)
}

/// Pixels darker than the Otsu threshold of the grayscale image, cleaned by
/// an opening then a closing with a radius-2 disk.
pub fn tissue_mask(slide: &Slide) -> TissueMask {
    let gray = slide.gray();
    // A slide always has pixels, so the histogram is non-empty.
    let t = otsu_threshold(&gray_histogram(&gray)).unwrap_or(0);
    let raw = TissueMask {
        width: slide.width,
        height: slide.height,
        data: gray.iter().map(|&g| g < t).collect(),
    };
    close(&open(&raw, MORPH_RADIUS), MORPH_RADIUS)
}
