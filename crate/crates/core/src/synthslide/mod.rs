//! Seeded synthetic stained slides with ground-truth class masks, TC scores
//! and simulated rater annotations and scores.

mod geometry;
mod render;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::{close, open, AnnotationSet, Region, Slide, TissueMask, MORPH_RADIUS};
use crate::inference::{tc_score, ClassMap, InferenceError};
use crate::models::{ClassLabel, CLASS_COUNT};
use crate::stats::{ScoreTable, StatsError};
use geometry::{convex_polygon, nearest_site, voronoi_cell, HalfPlane};
use render::{Textures, ValueNoise, BACKGROUND};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic slide config: {0}")]
    Config(String),
    #[error(transparent)]
    Score(#[from] InferenceError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Data(#[from] crate::datapipe::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Column names of the simulated raters and the ground truth.
pub const RATER_COLUMNS: [&str; 3] = ["TC_1", "TC_2", "TC_3"];
pub const TRUTH_COLUMN: &str = "TC_true";
/// Ids of the two annotating raters.
pub const ANNOTATORS: [&str; 2] = ["rater_a", "rater_b"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Target percent of tumor area that is positive.
    pub target_tc: f64,
    /// Tissue-area weights per class. The two tumor weights together give
    /// the tumor area; `target_tc` decides its positive/negative split.
    /// The NON_TISSUE weight must be zero.
    pub class_mix: [f64; CLASS_COUNT],
    /// Multiplies cell and fibre sizes.
    pub texture_scale: f64,
    /// Rater score noise, percent.
    pub rater_noise_sd: f64,
    /// Fraction of the slide covered by tissue.
    pub tissue_fraction: f64,
    /// Voronoi site spacing of the class partition, pixels.
    pub region_size: f64,
    /// Maximum per-region annotation boundary offset, pixels.
    pub annotation_jitter: f64,
    /// Slides must be at least 4 patches wide and high.
    pub patch_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 256,
            height: 256,
            target_tc: 50.0,
            class_mix: [0.22, 0.22, 0.07, 0.08, 0.06, 0.10, 0.25, 0.0],
            texture_scale: 1.0,
            rater_noise_sd: 5.0,
            tissue_fraction: 0.6,
            region_size: 48.0,
            annotation_jitter: 3.0,
            patch_size: 32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.width < 4 * self.patch_size || self.height < 4 * self.patch_size {
            return bad(format!(
                "{}×{} slide is smaller than 4 × patch size {}",
                self.width, self.height, self.patch_size
            ));
        }
        if !(0.0..=100.0).contains(&self.target_tc) {
            return bad(format!("target_tc {} outside [0, 100]", self.target_tc));
        }
        if self.class_mix.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("class_mix weights must be finite and nonnegative".into());
        }
        let sum: f64 = self.class_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return bad(format!("class_mix sums to {sum}, not 1"));
        }
        if self.class_mix[ClassLabel::NonTissue.index()] != 0.0 {
            return bad("NON_TISSUE follows from tissue coverage and cannot be mixed".into());
        }
        if self.class_mix[0] + self.class_mix[1] <= 0.0 {
            return bad("class_mix has no tumor weight".into());
        }
        if !(self.tissue_fraction > 0.0 && self.tissue_fraction <= 1.0) {
            return bad(format!("tissue_fraction {} outside (0, 1]", self.tissue_fraction));
        }
        if !(self.texture_scale > 0.0 && self.region_size >= 8.0) {
            return bad("texture_scale must be positive and region_size ≥ 8".into());
        }
        if !(self.rater_noise_sd >= 0.0 && (0.0..=3.0).contains(&self.annotation_jitter)) {
            return bad("rater_noise_sd must be ≥ 0 and annotation_jitter in [0, 3]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub class_mask: ClassMap,
    /// TC score of the class mask, percent.
    pub true_tc: f64,
    pub rater_scores: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSlide {
    pub slide: Slide,
    pub truth: GroundTruth,
    pub annotations: [AnnotationSet; 2],
}

/// One convex class region: a Voronoi cell, or half of the split tumor cell.
struct Piece {
    label: ClassLabel,
    planes: Vec<HalfPlane>,
    tissue_px: usize,
}

/// Generate one slide from its config.
pub fn generate_slide(cfg: &SynthConfig) -> Result<SynthSlide> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let tissue = tissue_layout(&mut rng, cfg);
    let tissue_px = tissue.count();
    if tissue_px == 0 {
        return Err(SynthError::Config("no tissue generated".into()));
    }

    // Class partition: jittered Voronoi sites.
    let nx = ((w as f64 / cfg.region_size).round() as usize).max(1);
    let ny = ((h as f64 / cfg.region_size).round() as usize).max(1);
    let (sx, sy) = (w as f64 / nx as f64, h as f64 / ny as f64);
    let sites: Vec<[f64; 2]> = (0..nx * ny)
        .map(|k| {
            let (i, j) = ((k % nx) as f64, (k / nx) as f64);
            [(i + rng.gen_range(0.15..0.85)) * sx, (j + rng.gen_range(0.15..0.85)) * sy]
        })
        .collect();
    let cell_of: Vec<usize> = (0..w * h)
        .map(|i| nearest_site(&sites, [(i % w) as f64 + 0.5, (i / w) as f64 + 0.5]))
        .collect();
    let mut cell_tissue = vec![0usize; sites.len()];
    for (i, &c) in cell_of.iter().enumerate() {
        cell_tissue[c] += tissue.data[i] as usize;
    }

    // Greedy assignment: largest cells first, each to the class (tumor
    // counted as one) with the largest remaining deficit.
    const TUMOR: usize = 0;
    let groups: Vec<usize> = std::iter::once(TUMOR).chain(2..CLASS_COUNT - 1).collect();
    let weight = |g: usize| if g == TUMOR { cfg.class_mix[0] + cfg.class_mix[1] } else { cfg.class_mix[g] };
    let mut assigned = vec![0.0f64; CLASS_COUNT];
    let mut cell_group = vec![ClassLabel::Stroma.index(); sites.len()];
    let mut order: Vec<usize> = (0..sites.len()).collect();
    order.sort_by(|&a, &b| cell_tissue[b].cmp(&cell_tissue[a]).then(a.cmp(&b)));
    for &c in order.iter().filter(|&&c| cell_tissue[c] > 0) {
        let g = *groups
            .iter()
            .max_by(|&&a, &&b| {
                let da = weight(a) * tissue_px as f64 - assigned[a];
                let db = weight(b) * tissue_px as f64 - assigned[b];
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .unwrap_or(&TUMOR);
        cell_group[c] = g;
        assigned[g] += cell_tissue[c] as f64;
    }

    // Tumor cells in random order: positive until the target is reached,
    // with one cell split by a vertical line.
    let mut tumor_cells: Vec<usize> = (0..sites.len())
        .filter(|&c| cell_group[c] == TUMOR && cell_tissue[c] > 0)
        .collect();
    if tumor_cells.is_empty() {
        return Err(SynthError::Config("class_mix leaves no tumor region on this slide".into()));
    }
    tumor_cells.shuffle(&mut rng);
    let tumor_px: usize = tumor_cells.iter().map(|&c| cell_tissue[c]).sum();
    let mut remaining = (cfg.target_tc / 100.0 * tumor_px as f64).round() as usize;
    let mut cell_label: Vec<ClassLabel> = cell_group.iter().map(|&g| ClassLabel::ALL[g]).collect();
    let mut split: Option<(usize, usize)> = None;
    for &c in &tumor_cells {
        if cell_tissue[c] <= remaining {
            cell_label[c] = ClassLabel::TcPos;
            remaining -= cell_tissue[c];
        } else if remaining > 0 && split.is_none() {
            split = Some((c, split_column(&cell_of, &tissue, c, remaining, w)));
            cell_label[c] = ClassLabel::TcNeg;
            remaining = 0;
        } else {
            cell_label[c] = ClassLabel::TcNeg;
        }
    }

    let label_at = |i: usize| -> ClassLabel {
        if !tissue.data[i] {
            return ClassLabel::NonTissue;
        }
        let c = cell_of[i];
        match split {
            Some((sc, x0)) if sc == c && i % w < x0 => ClassLabel::TcPos,
            _ => cell_label[c],
        }
    };
    let class_mask = ClassMap::new(w, h, (0..w * h).map(label_at).collect())?;
    let true_tc = tc_score(&class_mask)?.value;

    // Render.
    let textures = Textures::new(&mut rng, w, h, cfg.texture_scale);
    let angles: Vec<f64> = (0..sites.len()).map(|_| rng.gen_range(0.0..std::f64::consts::PI)).collect();
    let stain: Vec<f64> = (0..sites.len()).map(|_| rng.gen_range(0.92..1.03)).collect();
    let tint = [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)];
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pixels = Vec::with_capacity(w * h * 3);
    for i in 0..w * h {
        let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
        let label = class_mask.labels[i];
        let (rgb, sd) = if label == ClassLabel::NonTissue {
            (BACKGROUND, 2.5)
        } else {
            let c = cell_of[i];
            let base = textures.shade(label, x, y, angles[c]);
            ([0, 1, 2].map(|k| base[k] * stain[c] + tint[k]), 5.0)
        };
        for v in rgb {
            let n: f64 = noise.sample(&mut rng);
            pixels.push((v + sd * n).round().clamp(0.0, 255.0) as u8);
        }
    }
    let slide_id = format!("synth_{:016x}", cfg.seed);
    let slide = Slide::new(slide_id.clone(), w, h, pixels)?;

    // Convex class pieces for the annotators.
    let mut pieces = Vec::new();
    for c in 0..sites.len() {
        if cell_tissue[c] == 0 {
            continue;
        }
        let planes = voronoi_cell(&sites, c);
        match split {
            Some((sc, x0)) if sc == c => {
                let (left, right) = piece_tissue(&cell_of, &tissue, c, x0, w);
                let x0 = x0 as f64;
                let mut pos = planes.clone();
                pos.push(HalfPlane { n: [1.0, 0.0], c: x0 });
                let mut neg = planes;
                neg.push(HalfPlane { n: [-1.0, 0.0], c: -x0 });
                pieces.push(Piece { label: ClassLabel::TcPos, planes: pos, tissue_px: left });
                pieces.push(Piece { label: ClassLabel::TcNeg, planes: neg, tissue_px: right });
            }
            _ => pieces.push(Piece { label: cell_label[c], planes, tissue_px: cell_tissue[c] }),
        }
    }
    let margin = 4.0;
    let rect = [-margin, -margin, w as f64 + margin, h as f64 + margin];
    let annotations = ANNOTATORS.map(|rater| {
        let regions = pieces
            .iter()
            .filter(|p| p.tissue_px > 0)
            .filter_map(|p| {
                let r = rng.gen_range(-cfg.annotation_jitter..=cfg.annotation_jitter);
                let planes: Vec<HalfPlane> = p.planes.iter().map(|h| h.offset(r)).collect();
                convex_polygon(rect, &planes).map(|polygon| Region { label: p.label, polygon })
            })
            .collect();
        AnnotationSet {
            slide_id: slide_id.clone(),
            rater_id: rater.to_string(),
            regions,
        }
    });

    let rater_scores = [0; 3].map(|_| {
        let n: f64 = noise.sample(&mut rng);
        (true_tc + cfg.rater_noise_sd * n).clamp(0.0, 100.0)
    });

    Ok(SynthSlide {
        slide,
        truth: GroundTruth {
            class_mask,
            true_tc,
            rater_scores,
        },
        annotations,
    })
}

/// Thresholded two-octave value noise, cleaned like a detected mask, at the
/// requested coverage.
fn tissue_layout(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> TissueMask {
    let (w, h) = (cfg.width, cfg.height);
    let scale = w.min(h) as f64 / 3.0;
    let coarse = ValueNoise::new(rng, w, h, scale);
    let fine = ValueNoise::new(rng, w, h, scale / 2.5);
    let field: Vec<f64> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            coarse.sample(x, y) + 0.4 * fine.sample(x, y)
        })
        .collect();
    let mut sorted = field.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let k = ((1.0 - cfg.tissue_fraction) * (w * h) as f64).floor() as usize;
    let threshold = if k == 0 { f64::NEG_INFINITY } else { sorted[k.min(w * h - 1)] };
    let raw = TissueMask {
        width: w,
        height: h,
        data: field.iter().map(|&v| v >= threshold).collect(),
    };
    close(&open(&raw, MORPH_RADIUS), MORPH_RADIUS)
}

/// Column `x0` such that the cell's tissue pixels left of it number as close
/// to `want` as possible.
fn split_column(cell_of: &[usize], tissue: &TissueMask, cell: usize, want: usize, w: usize) -> usize {
    let mut cols = vec![0usize; w];
    for (i, &c) in cell_of.iter().enumerate() {
        if c == cell && tissue.data[i] {
            cols[i % w] += 1;
        }
    }
    let (mut best, mut best_err, mut acc) = (0, want, 0usize);
    for (x, n) in cols.iter().enumerate() {
        acc += n;
        let err = acc.abs_diff(want);
        if err < best_err {
            best = x + 1;
            best_err = err;
        }
    }
    best
}

fn piece_tissue(cell_of: &[usize], tissue: &TissueMask, cell: usize, x0: usize, w: usize) -> (usize, usize) {
    let (mut l, mut r) = (0, 0);
    for (i, &c) in cell_of.iter().enumerate() {
        if c == cell && tissue.data[i] {
            if i % w < x0 {
                l += 1;
            } else {
                r += 1;
            }
        }
    }
    (l, r)
}

/// A generated cohort and its score table (three rater columns plus the
/// ground truth).
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub slides: Vec<SynthSlide>,
    pub scores: ScoreTable,
}

/// `n` slides with target TC values evenly spaced over `range` and shuffled
/// by the template seed; each slide gets its own seed from the same stream.
pub fn generate_cohort(n: usize, template: &SynthConfig, range: (f64, f64)) -> Result<Cohort> {
    if n == 0 {
        return Err(SynthError::Config("cohort size must be at least 1".into()));
    }
    let (lo, hi) = range;
    if !(0.0..=100.0).contains(&lo) || !(lo..=100.0).contains(&hi) {
        return Err(SynthError::Config(format!("TC range [{lo}, {hi}] invalid")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(template.seed);
    let mut targets: Vec<f64> = if n == 1 {
        vec![(lo + hi) / 2.0]
    } else {
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    };
    targets.shuffle(&mut rng);
    let configs: Vec<SynthConfig> = targets
        .iter()
        .map(|&t| SynthConfig {
            seed: rng.next_u64(),
            target_tc: t,
            ..template.clone()
        })
        .collect();
    let mut slides: Vec<SynthSlide> = configs.par_iter().map(generate_slide).collect::<Result<_>>()?;
    for (i, s) in slides.iter_mut().enumerate() {
        let id = format!("slide_{i:03}");
        s.slide.id = id.clone();
        for a in &mut s.annotations {
            a.slide_id = id.clone();
        }
    }
    let mut scores = ScoreTable::new(slides.iter().map(|s| s.slide.id.clone()).collect());
    for (k, name) in RATER_COLUMNS.iter().enumerate() {
        scores.set_column(name, slides.iter().map(|s| s.truth.rater_scores[k]).collect())?;
    }
    scores.set_column(TRUTH_COLUMN, slides.iter().map(|s| s.truth.true_tc).collect())?;
    Ok(Cohort { slides, scores })
}

/// Directory layout of a written cohort.
pub struct CohortPaths;

impl CohortPaths {
    pub fn slide(dir: &Path, id: &str) -> std::path::PathBuf {
        dir.join("slides").join(format!("{id}.png"))
    }
    pub fn annotation(dir: &Path, id: &str, rater: &str) -> std::path::PathBuf {
        dir.join("annotations").join(format!("{id}.{rater}.json"))
    }
    pub fn truth_mask(dir: &Path, id: &str) -> std::path::PathBuf {
        dir.join("masks").join(format!("{id}.png"))
    }
    pub fn scores(dir: &Path) -> std::path::PathBuf {
        dir.join("scores.csv")
    }
}

impl Cohort {
    /// Slides as PNG, annotations as JSON, ground-truth class maps as
    /// grayscale PNG and the score table as CSV, each written atomically.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for s in &self.slides {
            let id = &s.slide.id;
            crate::io::write_atomic(&CohortPaths::slide(dir, id), |p| s.slide.save_png(p))?;
            for a in &s.annotations {
                let json = a.to_json()?;
                crate::io::write_bytes(&CohortPaths::annotation(dir, id, &a.rater_id), json.as_bytes())?;
            }
            crate::io::write_atomic(&CohortPaths::truth_mask(dir, id), |p| s.truth.class_mask.save_png(p))?;
        }
        let mut csv = Vec::new();
        self.scores.write_csv(&mut csv)?;
        crate::io::write_bytes(&CohortPaths::scores(dir), &csv)?;
        Ok(())
    }
}
