use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tcscore::datapipe::PatchPlan;
use tcscore::inference::PredictOptions;
use tcscore::models::ArchConfig;
use tcscore::stats::{DeltaScale, StatusRule};
use tcscore::synthslide::{SynthConfig, RATER_COLUMNS, TRUTH_COLUMN};
use tcscore::training::TrainConfig;

/// Every knob of a run. Written back next to the outputs after flag
/// overrides so the run can be replayed from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub fs_vgg: TrainConfig,
    pub ae_ssl: TrainConfig,
    pub acgan: TrainConfig,
    pub synth: SynthConfig,
    pub cohort: CohortConfig,
    pub patches: PatchPlan,
    pub predict: PredictConfig,
    pub stats: StatsConfig,
    pub compare: CompareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            fs_vgg: TrainConfig::fully_supervised(),
            ae_ssl: TrainConfig::autoencoder(),
            acgan: TrainConfig::acgan(),
            synth: SynthConfig::default(),
            cohort: CohortConfig::default(),
            patches: PatchPlan::default(),
            predict: PredictConfig::default(),
            stats: StatsConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    pub slides: usize,
    pub tc_range: (f64, f64),
    /// Slides used for training, in cohort order; the next `val_slides`
    /// select the model and the rest are held out for scoring.
    pub train_slides: usize,
    pub val_slides: usize,
    /// Cap on validation patches evaluated per model-selection step.
    pub max_val_patches: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            slides: 30,
            tc_range: (0.0, 100.0),
            train_slides: 15,
            val_slides: 5,
            max_val_patches: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    /// Window stride in pixels; `None` means a quarter of the patch size.
    pub stride: Option<usize>,
    pub min_tissue: f64,
    pub batch: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            stride: None,
            min_tissue: 0.5,
            batch: 64,
        }
    }
}

impl PredictConfig {
    pub fn options(&self, patch_size: usize) -> PredictOptions {
        let base = PredictOptions::for_window(patch_size);
        PredictOptions {
            stride: self.stride.unwrap_or(base.stride),
            min_tissue: self.min_tissue,
            batch: self.batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    pub cutoff: f64,
    /// Positive means strictly above the cutoff.
    pub strict: bool,
    pub rater_columns: Vec<String>,
    pub delta_scale: DeltaScale,
    pub thresholds: Vec<f64>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            cutoff: 25.0,
            strict: false,
            rater_columns: RATER_COLUMNS.iter().map(|s| s.to_string()).collect(),
            delta_scale: DeltaScale::default(),
            thresholds: (0..=20).map(|i| i as f64).collect(),
        }
    }
}

impl StatsConfig {
    pub fn rule(&self) -> StatusRule {
        StatusRule {
            cutoff: self.cutoff,
            strict: self.strict,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    /// Fraction of labeled training patches kept.
    pub label_fraction: f64,
    /// Score-table column the automated scores are compared with.
    pub reference: String,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            label_fraction: 0.1,
            reference: TRUTH_COLUMN.to_string(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// One seed drives generation, sampling and initialization.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.fs_vgg.seed = seed;
        self.ae_ssl.seed = seed;
        self.acgan.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.synth.validate()?;
        if self.patches.patch_size != self.arch.patch_size {
            bail!(
                "patches.patch_size {} differs from arch.patch_size {}",
                self.patches.patch_size,
                self.arch.patch_size
            );
        }
        let c = &self.cohort;
        if c.train_slides == 0 || c.val_slides == 0 || c.train_slides + c.val_slides >= c.slides {
            bail!("cohort split needs train, validation and held-out slides");
        }
        if !(self.compare.label_fraction > 0.0 && self.compare.label_fraction <= 1.0) {
            bail!("compare.label_fraction must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        tcscore::io::write_bytes(&dir.join("config.json"), self.to_json()?.as_bytes())?;
        Ok(())
    }
}
