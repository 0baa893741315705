//! Training loops for the three detectors, with accuracy-based model
//! selection on a held-out labeled split.

mod data;
mod loops;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{DataError, Slide};
use crate::models::{Checkpoint, ModelError};
use crate::tensor::{AdamConfig, TensorError};

pub use data::{PatchBank, Pick, Sampler};
pub use loops::{discriminator_source_accuracy, train_acgan, train_ae_ssl, train_fs, AcganOutcome};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0} patch set is empty")]
    Empty(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {loss} loss at iteration {iteration}")]
    Diverged { iteration: u64, loss: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub iterations: u64,
    pub eval_every: u64,
    pub seed: u64,
    /// Weight of the reconstruction term in autoencoder training.
    pub recon_weight: f32,
    /// Random quarter-turns on every sampled patch.
    pub augment: bool,
    /// Draw labeled patches class-balanced instead of uniformly.
    pub balance_classes: bool,
    /// Keep the generator at its initialization (discriminator-only updates).
    pub freeze_generator: bool,
    /// Keep per-iteration batch manifests in the report.
    pub record_batches: bool,
    /// Generator samples per class in each mosaic; 0 disables mosaics.
    pub samples_per_class: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            labeled_batch: 32,
            unlabeled_batch: 32,
            iterations: 10_000,
            eval_every: 500,
            seed: 0,
            recon_weight: 1.0,
            augment: true,
            balance_classes: false,
            freeze_generator: false,
            record_batches: false,
            samples_per_class: 8,
        }
    }
}

impl TrainConfig {
    /// 64 labeled patches per batch, 5000 iterations.
    pub fn fully_supervised() -> Self {
        Self {
            labeled_batch: 64,
            unlabeled_batch: 0,
            iterations: 5_000,
            ..Self::default()
        }
    }

    /// 32 labeled + 32 unlabeled, 5000 iterations.
    pub fn autoencoder() -> Self {
        Self {
            iterations: 5_000,
            ..Self::default()
        }
    }

    /// 32 labeled + 32 unlabeled, 10000 iterations.
    pub fn acgan() -> Self {
        Self::default()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub(crate) fn validate(&self, semi_supervised: bool) -> Result<()> {
        if self.labeled_batch == 0 {
            return Err(TrainError::Config("labeled_batch must be positive".into()));
        }
        if semi_supervised && self.unlabeled_batch == 0 {
            return Err(TrainError::Config("unlabeled_batch must be positive".into()));
        }
        if !semi_supervised && self.unlabeled_batch != 0 {
            return Err(TrainError::Config("fully supervised training takes no unlabeled patches".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::Config("eval_every must be positive".into()));
        }
        let finite = [self.lr, self.beta1, self.beta2, self.recon_weight];
        if finite.iter().any(|v| !v.is_finite()) || self.lr <= 0.0 || self.recon_weight < 0.0 {
            return Err(TrainError::Config("learning rate and loss weights must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Independent RNG stream for one purpose (init, samplers, noise).
    pub(crate) fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }
}

/// Losses logged for one iteration; iteration 0 carries only the initial
/// evaluation. `L_S` and `L_C` are the discriminator-step (or classifier)
/// negative log-likelihoods, `g_objective` the generator-step loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub iteration: u64,
    #[serde(rename = "L_S")]
    pub l_s: Option<f64>,
    #[serde(rename = "L_C")]
    pub l_c: Option<f64>,
    pub recon: Option<f64>,
    pub d_objective: Option<f64>,
    pub g_objective: Option<f64>,
    pub test_accuracy: Option<f64>,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.l_s, self.l_c, self.recon, self.d_objective, self.g_objective]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
    }
}

/// Patches drawn for one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRecord {
    pub iteration: u64,
    pub labeled: Vec<Pick>,
    pub unlabeled: Vec<Pick>,
}

/// A generator sample mosaic: one row per class.
#[derive(Clone, Debug)]
pub struct SampleGrid {
    pub iteration: u64,
    pub image: Slide,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Snapshot with the highest validation accuracy (earliest on ties).
    pub best: Checkpoint,
    /// Snapshot after the final iteration.
    pub last: Checkpoint,
    pub trace: Vec<LossBundle>,
    pub batches: Vec<BatchRecord>,
}

impl TrainReport {
    /// `(iteration, accuracy)` for every evaluation in the trace.
    pub fn evaluations(&self) -> Vec<(u64, f64)> {
        self.trace
            .iter()
            .filter_map(|r| r.test_accuracy.map(|a| (r.iteration, a)))
            .collect()
    }
}

pub fn write_trace(path: &Path, trace: &[LossBundle]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<LossBundle>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Serialize)]
struct BatchRow<'a> {
    iteration: u64,
    role: &'static str,
    index: usize,
    slide_id: &'a str,
    x: usize,
    y: usize,
    label: i32,
    rotation: u8,
}

/// One CSV row per drawn patch, resolved against the source sets.
pub fn write_batch_manifest(
    path: &Path,
    batches: &[BatchRecord],
    labeled: &crate::datapipe::PatchSet,
    unlabeled: Option<&crate::datapipe::PatchSet>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for b in batches {
        let sets = [("labeled", &b.labeled, Some(labeled)), ("unlabeled", &b.unlabeled, unlabeled)];
        for (role, picks, set) in sets {
            let Some(set) = set else { continue };
            for pick in picks {
                let p = &set.patches[pick.index];
                w.serialize(BatchRow {
                    iteration: b.iteration,
                    role,
                    index: pick.index,
                    slide_id: &p.slide_id,
                    x: p.x,
                    y: p.y,
                    label: p.label.map_or(-1, |l| l.index() as i32),
                    rotation: pick.rotation,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
