use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use serde::Serialize;
use tcscore::datapipe::{slide_patches, subsample, AnnotationSet, PatchKind, PatchSet, Slide};
use tcscore::inference::{predict, read_scores, tc_score, write_scores, ClassMap, InferenceError, TcScore};
use tcscore::io::{write_atomic, write_bytes};
use tcscore::models::{Checkpoint, Detector};
use tcscore::stats::{
    filtered_concordance_curve, leave_one_out_analysis, lin_ccc, mae, median_consolidate, pairwise_table, pearson,
    rater_variability, Comparison, ScoreTable,
};
use tcscore::synthslide::{generate_cohort, CohortPaths, ANNOTATORS};
use tcscore::training::{
    train_acgan, train_ae_ssl, train_fs, write_batch_manifest, write_trace, TrainConfig, TrainReport,
};

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    FsVgg,
    AeSsl,
    Acgan,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::FsVgg, Arch::AeSsl, Arch::Acgan];

    pub fn name(self) -> &'static str {
        match self {
            Arch::FsVgg => "fs-vgg",
            Arch::AeSsl => "ae-ssl",
            Arch::Acgan => "acgan",
        }
    }

    pub fn train_config(self, cfg: &RunConfig) -> &TrainConfig {
        match self {
            Arch::FsVgg => &cfg.fs_vgg,
            Arch::AeSsl => &cfg.ae_ssl,
            Arch::Acgan => &cfg.acgan,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| anyhow!("unknown architecture `{s}` (fs-vgg, ae-ssl, acgan)"))
    }
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, |tmp| -> Result<()> {
        let mut w = csv::Writer::from_path(tmp)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(write_bytes(path, text.as_bytes())?)
}

fn write_table(path: &Path, table: &ScoreTable) -> Result<()> {
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    Ok(write_bytes(path, &buf)?)
}

pub fn read_table(path: &Path) -> Result<ScoreTable> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    ScoreTable::read_csv(file).with_context(|| format!("reading score table {}", path.display()))
}

// ---------------------------------------------------------------- synth

/// Generate a cohort into `out`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let cohort = generate_cohort(cfg.cohort.slides, &cfg.synth, cfg.cohort.tc_range)?;
    cohort.write(out)?;
    cfg.write(out)?;
    info!("wrote {} slides to {}", cohort.slides.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------- data

/// Slide ids of a cohort directory split into train / validation / held out.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn cohort_split(cfg: &RunConfig, data: &Path) -> Result<Split> {
    let table = read_table(&CohortPaths::scores(data))?;
    let ids = table.slide_ids;
    let (nt, nv) = (cfg.cohort.train_slides, cfg.cohort.val_slides);
    if ids.len() <= nt + nv {
        bail!("cohort has {} slides; the split needs more than {}", ids.len(), nt + nv);
    }
    Ok(Split {
        train: ids[..nt].to_vec(),
        val: ids[nt..nt + nv].to_vec(),
        test: ids[nt + nv..].to_vec(),
    })
}

fn load_annotations(data: &Path, id: &str) -> Result<[AnnotationSet; 2]> {
    let load = |rater: &str| {
        let path = CohortPaths::annotation(data, id, rater);
        AnnotationSet::load(&path).with_context(|| format!("loading {}", path.display()))
    };
    Ok([load(ANNOTATORS[0])?, load(ANNOTATORS[1])?])
}

pub fn load_slide(path: &Path) -> Result<Slide> {
    Slide::load_png(path).with_context(|| format!("loading slide {}", path.display()))
}

/// Labeled and unlabeled patches of the listed slides.
pub fn collect_patches(cfg: &RunConfig, data: &Path, ids: &[String]) -> Result<(PatchSet, PatchSet)> {
    let mut labeled = PatchSet::new(PatchKind::Labeled);
    let mut unlabeled = PatchSet::new(PatchKind::Unlabeled);
    for id in ids {
        let slide = load_slide(&CohortPaths::slide(data, id))?;
        let [a, b] = load_annotations(data, id)?;
        let (l, u) = slide_patches(&slide, &a, &b, &cfg.patches)?;
        labeled.extend(l);
        unlabeled.extend(u);
    }
    Ok((labeled, unlabeled))
}

/// Training inputs shared by every architecture.
pub struct TrainingData {
    pub labeled: PatchSet,
    pub unlabeled: PatchSet,
    pub val: PatchSet,
}

pub fn training_data(cfg: &RunConfig, data: &Path, split: &Split, label_fraction: f64) -> Result<TrainingData> {
    let (labeled, unlabeled) = collect_patches(cfg, data, &split.train)?;
    let (val, _) = collect_patches(cfg, data, &split.val)?;
    let labeled = if label_fraction < 1.0 {
        subsample(&labeled, label_fraction, cfg.synth.seed)?
    } else {
        labeled
    };
    let cap = cfg.cohort.max_val_patches;
    let val = if cap > 0 && val.len() > cap {
        subsample(&val, cap as f64 / val.len() as f64, cfg.synth.seed ^ 0x5eed)?
    } else {
        val
    };
    info!(
        "patches: {} labeled {:?}, {} unlabeled, {} validation",
        labeled.len(),
        labeled.class_counts(),
        unlabeled.len(),
        val.len()
    );
    Ok(TrainingData {
        labeled,
        unlabeled,
        val,
    })
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub arch: String,
    pub labeled_patches: usize,
    pub unlabeled_patches: usize,
    pub val_patches: usize,
    pub best_iteration: u64,
    pub best_accuracy: Option<f64>,
    pub iterations: u64,
}

pub const MODEL_FILE: &str = "model.acgn";
pub const GENERATOR_FILE: &str = "generator.acgn";

fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, |tmp| -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(tmp)?);
        ckpt.write(&mut f)?;
        std::io::Write::flush(&mut f)?;
        Ok(())
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?);
    Checkpoint::read(&mut f).with_context(|| format!("reading checkpoint {}", path.display()))
}

/// Train one architecture on prepared data and write its artifacts to `out`.
pub fn train_on(cfg: &RunConfig, arch: Arch, data: &TrainingData, out: &Path) -> Result<TrainSummary> {
    let tc = arch.train_config(cfg);
    let report: TrainReport = match arch {
        Arch::FsVgg => train_fs(&cfg.arch, &data.labeled, &data.val, tc)?,
        Arch::AeSsl => train_ae_ssl(&cfg.arch, &data.labeled, &data.unlabeled, &data.val, tc)?,
        Arch::Acgan => {
            let outcome = train_acgan(&cfg.arch, &data.labeled, &data.unlabeled, &data.val, tc)?;
            write_checkpoint(&out.join(GENERATOR_FILE), &outcome.generator)?;
            for s in &outcome.samples {
                let path = out.join("samples").join(format!("{}.png", s.image.id));
                write_atomic(&path, |tmp| s.image.save_png(tmp))?;
            }
            outcome.report
        }
    };
    write_checkpoint(&out.join(MODEL_FILE), &report.best)?;
    write_atomic(&out.join("trace.csv"), |tmp| write_trace(tmp, &report.trace))?;
    if tc.record_batches {
        let unlabeled = (arch != Arch::FsVgg).then_some(&data.unlabeled);
        write_atomic(&out.join("batches.csv"), |tmp| {
            write_batch_manifest(tmp, &report.batches, &data.labeled, unlabeled)
        })?;
    }
    let summary = TrainSummary {
        arch: arch.name().to_string(),
        labeled_patches: data.labeled.len(),
        unlabeled_patches: if arch == Arch::FsVgg { 0 } else { data.unlabeled.len() },
        val_patches: data.val.len(),
        best_iteration: report.best.meta.iteration,
        best_accuracy: report.best.meta.accuracy,
        iterations: tc.iterations,
    };
    write_json(&out.join("summary.json"), &summary)?;
    info!(
        "{arch}: best validation accuracy {:?} at iteration {}",
        summary.best_accuracy, summary.best_iteration
    );
    Ok(summary)
}

pub fn train(cfg: &RunConfig, data_dir: &Path, arch: Arch, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let split = cohort_split(cfg, data_dir)?;
    let data = training_data(cfg, data_dir, &split, 1.0)?;
    cfg.write(out)?;
    train_on(cfg, arch, &data, out)
}

// ---------------------------------------------------------------- predict / score

pub const CLASS_MAP_SUFFIX: &str = ".classes.png";

/// Tissue mask, overlay and class map per slide into `out`; returns each
/// slide's score where tumor was found.
pub fn predict_slides(cfg: &RunConfig, checkpoint: &Path, slides: &[PathBuf], out: &Path) -> Result<Vec<(String, Option<TcScore>)>> {
    let detector = Detector::from_checkpoint(load_checkpoint(checkpoint)?)?;
    let opts = cfg.predict.options(detector.arch.patch_size);
    let mut scores = Vec::new();
    for path in slides {
        let slide = load_slide(path)?;
        let p = predict(&slide, &detector, opts)?;
        let id = &slide.id;
        write_atomic(&out.join(format!("{id}.tissue.png")), |tmp| p.mask.save_png(tmp))?;
        write_atomic(&out.join(format!("{id}.overlay.png")), |tmp| p.probs.save_overlay(tmp))?;
        write_atomic(&out.join(format!("{id}{CLASS_MAP_SUFFIX}")), |tmp| p.classes.save_png(tmp))?;
        let score = match p.score() {
            Ok(s) => Some(s),
            Err(InferenceError::NoTumorDetected) => {
                warn!("{id}: no tumor detected");
                None
            }
            Err(e) => return Err(e.into()),
        };
        info!("{id}: {} windows, TC {:?}", p.probs.windows, score.map(|s| s.value));
        scores.push((id.clone(), score));
    }
    Ok(scores)
}

/// Slide id of a class-map file: the stem without the class-map suffix.
pub fn class_map_id(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(CLASS_MAP_SUFFIX)
        .or_else(|| name.strip_suffix(".png"))
        .unwrap_or(&name)
        .to_string()
}

/// Score class maps and write the scores CSV. Slides without tumor pixels
/// are reported and left out.
pub fn score(maps: &[PathBuf], out: &Path) -> Result<Vec<(String, TcScore)>> {
    let mut rows = Vec::new();
    for path in maps {
        let map = ClassMap::load_png(path).with_context(|| format!("loading class map {}", path.display()))?;
        let id = class_map_id(path);
        match tc_score(&map) {
            Ok(s) => rows.push((id, s)),
            Err(InferenceError::NoTumorDetected) => warn!("{id}: no tumor detected, left out"),
            Err(e) => return Err(e.into()),
        }
    }
    if rows.is_empty() && !maps.is_empty() {
        bail!("no class map contained tumor pixels");
    }
    write_atomic(out, |tmp| -> Result<()> {
        write_scores(std::fs::File::create(tmp)?, &rows)?;
        Ok(())
    })?;
    Ok(rows)
}

/// Add a scores CSV to a score table as column `name`, keeping only slides
/// present in both.
pub fn merge_scores(table: &ScoreTable, scores: &Path, name: &str) -> Result<ScoreTable> {
    let file = std::fs::File::open(scores).with_context(|| format!("opening {}", scores.display()))?;
    let rows = read_scores(file)?;
    let ids: Vec<String> = table
        .slide_ids
        .iter()
        .filter(|id| rows.iter().any(|(r, _)| r == *id))
        .cloned()
        .collect();
    let mut merged = table.select(&ids);
    let values = ids
        .iter()
        .map(|id| rows.iter().find(|(r, _)| r == id).map(|(_, s)| s.value).expect("filtered above"))
        .collect();
    merged.set_column(name, values)?;
    Ok(merged)
}

// ---------------------------------------------------------------- concord / curves

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonRow {
    pub candidate: String,
    pub reference: String,
    pub n: usize,
    pub lcc: Option<f64>,
    pub pcc: Option<f64>,
    pub mae: Option<f64>,
    pub opa: f64,
    pub npa: Option<f64>,
    pub ppa: Option<f64>,
    pub both_pos: usize,
    pub both_neg: usize,
    pub cand_only: usize,
    pub ref_only: usize,
}

impl From<&Comparison> for ComparisonRow {
    fn from(c: &Comparison) -> Self {
        let a = &c.agreement;
        Self {
            candidate: c.candidate.clone(),
            reference: c.reference.clone(),
            n: a.n(),
            lcc: c.concordance.map(|r| r.lcc),
            pcc: c.concordance.map(|r| r.pcc),
            mae: c.concordance.map(|r| r.mae),
            opa: a.opa(),
            npa: a.npa(),
            ppa: a.ppa(),
            both_pos: a.both_pos,
            both_neg: a.both_neg,
            cand_only: a.cand_only,
            ref_only: a.ref_only,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConcordReport {
    pub cutoff: f64,
    pub pairwise: Vec<ComparisonRow>,
    pub leave_one_out: Option<Vec<ComparisonRow>>,
}

/// Pairwise matrix (optionally restricted to one reference) and, with four
/// or more columns, the leave-one-out analysis.
pub fn concord(
    cfg: &RunConfig,
    table: &ScoreTable,
    columns: Option<&[String]>,
    reference: Option<&str>,
    out: &Path,
) -> Result<ConcordReport> {
    let names: Vec<&str> = match columns {
        Some(c) => c.iter().map(String::as_str).collect(),
        None => table.names(),
    };
    if let Some(r) = reference {
        if !names.contains(&r) {
            bail!("reference column `{r}` not among {names:?}");
        }
    }
    let rule = cfg.stats.rule();
    let pairwise: Vec<ComparisonRow> = pairwise_table(table, &names, rule)?
        .iter()
        .filter(|c| reference.map_or(true, |r| c.reference == r))
        .map(ComparisonRow::from)
        .collect();
    let leave_one_out = if names.len() >= 4 {
        Some(leave_one_out_analysis(table, &names, rule)?.iter().map(ComparisonRow::from).collect::<Vec<_>>())
    } else {
        info!("leave-one-out analysis needs four columns, got {}", names.len());
        None
    };
    write_csv_rows(&out.join("pairwise.csv"), &pairwise)?;
    if let Some(loo) = &leave_one_out {
        write_csv_rows(&out.join("leave_one_out.csv"), loo)?;
    }
    let report = ConcordReport {
        cutoff: cfg.stats.cutoff,
        pairwise,
        leave_one_out,
    };
    write_json(&out.join("concordance.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct CurveRow {
    pub candidate: String,
    pub reference: String,
    pub threshold: f64,
    pub included: usize,
    pub included_fraction: f64,
    pub lcc: Option<f64>,
    pub pcc: Option<f64>,
    pub mae: Option<f64>,
    pub opa: Option<f64>,
    pub npa: Option<f64>,
    pub ppa: Option<f64>,
}

/// Concordance against the rater median as slides with rater variability
/// above each threshold are excluded. Every non-rater column is a
/// candidate against the median of all raters; each rater is also scored
/// against the median of the other raters.
pub fn curves(cfg: &RunConfig, table: &ScoreTable, out: &Path) -> Result<Vec<CurveRow>> {
    let raters: Vec<&str> = cfg.stats.rater_columns.iter().map(String::as_str).collect();
    if raters.len() < 2 {
        bail!("curves need at least two rater columns");
    }
    let rater_data: Vec<&[f64]> = raters.iter().map(|r| table.column(r)).collect::<std::result::Result<_, _>>()?;
    let variability = rater_variability(&rater_data, cfg.stats.delta_scale)?;
    let consolidated = median_consolidate(&rater_data)?;
    let mut jobs: Vec<(String, String, Vec<f64>, Vec<f64>)> = table
        .names()
        .into_iter()
        .filter(|n| !raters.contains(n))
        .map(|n| Ok((n.to_string(), "median(raters)".to_string(), table.column(n)?.to_vec(), consolidated.clone())))
        .collect::<Result<_>>()?;
    if raters.len() >= 3 {
        for (i, r) in raters.iter().enumerate() {
            let rest: Vec<&[f64]> = (0..raters.len()).filter(|&j| j != i).map(|j| rater_data[j]).collect();
            jobs.push((r.to_string(), format!("median(others of {r})"), rater_data[i].to_vec(), median_consolidate(&rest)?));
        }
    }
    let rule = cfg.stats.rule();
    let mut rows = Vec::new();
    for (cand, reference, c, r) in jobs {
        for p in filtered_concordance_curve(&c, &r, &variability, &cfg.stats.thresholds, rule)? {
            rows.push(CurveRow {
                candidate: cand.clone(),
                reference: reference.clone(),
                threshold: p.threshold,
                included: p.included,
                included_fraction: p.included_fraction,
                lcc: p.concordance.map(|c| c.lcc),
                pcc: p.concordance.map(|c| c.pcc),
                mae: p.concordance.map(|c| c.mae),
                opa: p.agreement.map(|a| a.opa()),
                npa: p.agreement.and_then(|a| a.npa()),
                ppa: p.agreement.and_then(|a| a.ppa()),
            });
        }
    }
    write_csv_rows(out, &rows)?;
    Ok(rows)
}

// ---------------------------------------------------------------- compare

#[derive(Clone, Debug, Serialize)]
pub struct BarRow {
    pub model: String,
    /// `None` when the held-out scores have zero variance.
    pub lcc: Option<f64>,
    pub pcc: Option<f64>,
    pub mae: f64,
    /// Held-out slides; a slide without detected tumor scores 0.
    pub n: usize,
}

/// Train every architecture on the same (label-subsampled) patches, score
/// the held-out slides and write the per-model concordance bars.
pub fn compare(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<Vec<BarRow>> {
    cfg.validate()?;
    let split = cohort_split(cfg, data_dir)?;
    let data = training_data(cfg, data_dir, &split, cfg.compare.label_fraction)?;
    cfg.write(out)?;
    let table = read_table(&CohortPaths::scores(data_dir))?.select(&split.test);
    let reference = table.column(&cfg.compare.reference)?.to_vec();
    let slides: Vec<PathBuf> = split.test.iter().map(|id| CohortPaths::slide(data_dir, id)).collect();
    let mut bars = Vec::new();
    let mut held_out = table.clone();
    for arch in Arch::ALL {
        let dir = out.join(arch.name());
        train_on(cfg, arch, &data, &dir)?;
        let scores = predict_slides(cfg, &dir.join(MODEL_FILE), &slides, &dir.join("predictions"))?;
        let column: Vec<f64> = scores.iter().map(|(_, s)| s.map_or(0.0, |s| s.value)).collect();
        let lcc = lin_ccc(&column, &reference).ok();
        let pcc = pearson(&column, &reference).ok();
        if lcc.is_none() || pcc.is_none() {
            warn!("{arch}: held-out scores have zero variance, correlation undefined");
        }
        bars.push(BarRow {
            model: arch.name().to_string(),
            lcc,
            pcc,
            mae: mae(&column, &reference).with_context(|| format!("{arch}: held-out MAE"))?,
            n: column.len(),
        });
        held_out.set_column(&format!("TC_{}", arch.name()), column)?;
    }
    write_csv_rows(&out.join("bars.csv"), &bars)?;
    write_table(&out.join("held_out_scores.csv"), &held_out)?;
    Ok(bars)
}
