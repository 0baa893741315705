//! Region detectors: the AC-GAN pair, the fully-convolutional VGG-style
//! classifier and its autoencoder semi-supervised variant.

mod fsvgg;
mod gan;
mod layers;

use std::fmt;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore, Tensor, TensorError};

pub use fsvgg::{Autoencoder, FsVgg};
pub use gan::{noise_batch, DiscriminatorOutput, Discriminator, Generator, GeneratorInput};

pub const CLASS_COUNT: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("checkpoint metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("checkpoint does not match its architecture: {0}")]
    Mismatch(String),
    #[error("a {0} checkpoint cannot classify patches")]
    NotAClassifier(ModelKind),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// The eight region classes, serialized by index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
#[repr(u8)]
pub enum ClassLabel {
    TcPos = 0,
    TcNeg = 1,
    LymphPos = 2,
    LymphNeg = 3,
    Macrophage = 4,
    Necrosis = 5,
    Stroma = 6,
    NonTissue = 7,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; CLASS_COUNT] = [
        ClassLabel::TcPos,
        ClassLabel::TcNeg,
        ClassLabel::LymphPos,
        ClassLabel::LymphNeg,
        ClassLabel::Macrophage,
        ClassLabel::Necrosis,
        ClassLabel::Stroma,
        ClassLabel::NonTissue,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::TcPos => "TC_POS",
            ClassLabel::TcNeg => "TC_NEG",
            ClassLabel::LymphPos => "LYMPH_POS",
            ClassLabel::LymphNeg => "LYMPH_NEG",
            ClassLabel::Macrophage => "MACROPHAGE",
            ClassLabel::Necrosis => "NECROSIS",
            ClassLabel::Stroma => "STROMA",
            ClassLabel::NonTissue => "NON_TISSUE",
        }
    }
}

impl From<ClassLabel> for u8 {
    fn from(c: ClassLabel) -> u8 {
        c as u8
    }
}

impl TryFrom<u8> for ClassLabel {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        ClassLabel::from_index(v as usize).ok_or_else(|| format!("class index {v} outside [0, 8)"))
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub patch_size: usize,
    pub base_channels: usize,
    pub noise_dim: usize,
    pub class_count: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            base_channels: 32,
            noise_dim: 100,
            class_count: CLASS_COUNT,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if ![32, 64, 128].contains(&self.patch_size) {
            return Err(ModelError::Arch(format!(
                "patch_size {} not in {{32, 64, 128}}",
                self.patch_size
            )));
        }
        if self.base_channels == 0 || self.noise_dim == 0 {
            return Err(ModelError::Arch("channel and noise counts must be positive".into()));
        }
        if self.class_count != CLASS_COUNT {
            return Err(ModelError::Arch(format!(
                "class_count must be {CLASS_COUNT}, got {}",
                self.class_count
            )));
        }
        Ok(())
    }

    /// Spatial extent after the three stride-2 stages.
    pub fn bottleneck(&self) -> usize {
        self.patch_size / 8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "fs-vgg")]
    FsVgg,
    #[serde(rename = "ae-ssl")]
    AeSsl,
    #[serde(rename = "acgan-d")]
    AcganDiscriminator,
    #[serde(rename = "acgan-g")]
    AcganGenerator,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::FsVgg => "fs-vgg",
            ModelKind::AeSsl => "ae-ssl",
            ModelKind::AcganDiscriminator => "acgan-d",
            ModelKind::AcganGenerator => "acgan-g",
        })
    }
}

impl ModelKind {
    /// Fresh parameters for this kind; the name set defines the checkpoint
    /// layout.
    pub fn init_params(self, arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
        match self {
            ModelKind::FsVgg => FsVgg::new(*arch)?.init_params(rng),
            ModelKind::AeSsl => Autoencoder::new(*arch)?.init_params(rng),
            ModelKind::AcganDiscriminator => Discriminator::new(*arch)?.init_params(rng),
            ModelKind::AcganGenerator => Generator::new(*arch)?.init_params(rng),
        }
    }
}

/// Metadata stored in the checkpoint's `__config__` block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub arch: ArchConfig,
    pub iteration: u64,
    /// Validation accuracy when the snapshot was taken.
    pub accuracy: Option<f64>,
}

/// A parameter snapshot with its metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let json = serde_json::to_string(&self.meta)?;
        let tensors: Vec<(String, Tensor)> = self
            .params
            .snapshot()
            .into_iter()
            .map(|(name, value, _)| (name, value))
            .collect();
        write_checkpoint(w, &json, &tensors)?;
        Ok(())
    }

    /// Parse a checkpoint and check its tensors against the layout implied
    /// by the recorded architecture.
    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let (json, tensors) = read_checkpoint(r)?;
        let meta: CheckpointMeta = serde_json::from_str(&json)?;
        meta.arch.validate()?;
        let mut params = meta.kind.init_params(&meta.arch, &mut ChaCha8Rng::seed_from_u64(0))?;
        if tensors.len() != params.len() {
            return Err(ModelError::Mismatch(format!(
                "{} tensors stored, {} expected",
                tensors.len(),
                params.len()
            )));
        }
        for (name, value) in tensors {
            if !params.contains(&name) {
                return Err(ModelError::Mismatch(format!("unexpected tensor `{name}`")));
            }
            params.set(&name, value)?;
        }
        Ok(Self { meta, params })
    }
}

/// A trained model that maps image patches to class probabilities.
#[derive(Clone, Debug)]
pub struct Detector {
    pub kind: ModelKind,
    pub arch: ArchConfig,
    pub params: ParamStore,
}

impl Detector {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.meta.kind == ModelKind::AcganGenerator {
            return Err(ModelError::NotAClassifier(ckpt.meta.kind));
        }
        Ok(Self {
            kind: ckpt.meta.kind,
            arch: ckpt.meta.arch,
            params: ckpt.params,
        })
    }

    /// `N×3×p×p` images in [−1, 1] → `N×8` class probabilities, inference
    /// mode. Safe to call concurrently.
    pub fn class_probs(&self, images: &Tensor) -> Result<Tensor> {
        let p = self.arch.patch_size;
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != p || s[3] != p {
            return Err(TensorError::Shape {
                op: "Detector::class_probs",
                lhs: s.to_vec(),
                rhs: vec![s.first().copied().unwrap_or(0), 3, p, p],
            }
            .into());
        }
        match self.kind {
            ModelKind::FsVgg => {
                let grid = FsVgg::new(self.arch)?.class_probs_grid(&self.params, images)?;
                Ok(grid.reshape([s[0], CLASS_COUNT])?)
            }
            ModelKind::AeSsl => {
                let grid = Autoencoder::new(self.arch)?.classifier().class_probs_grid(&self.params, images)?;
                Ok(grid.reshape([s[0], CLASS_COUNT])?)
            }
            ModelKind::AcganDiscriminator => {
                Ok(Discriminator::new(self.arch)?.evaluate(&self.params, images)?.class_probs)
            }
            ModelKind::AcganGenerator => Err(ModelError::NotAClassifier(self.kind)),
        }
    }
}
