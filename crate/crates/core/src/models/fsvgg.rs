use rand_chacha::ChaCha8Rng;

use super::layers::{Ctx, Init, LINEAR_GAIN, RELU_GAIN};
use super::{ArchConfig, Result, CLASS_COUNT};
use crate::tensor::{BatchNormMode, ParamStore, SpectralMode, Tape, Tensor, TensorError, Var};

/// Shallow fully-convolutional VGG-style classifier.
///
/// Three blocks of two 3×3 conv + BN + relu layers, the second one strided,
/// then a valid `p/8 × p/8` conv (the fully-convolutional form of a dense
/// layer) and a 1×1 conv to class logits. A `p×p` patch yields a 1×1 grid;
/// larger inputs yield one cell per 8-pixel step.
#[derive(Clone, Copy, Debug)]
pub struct FsVgg {
    arch: ArchConfig,
}

const BLOCKS: [&str; 3] = ["enc.b1", "enc.b2", "enc.b3"];

impl FsVgg {
    pub fn new(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    fn widths(&self) -> [(usize, usize); 3] {
        let b = self.arch.base_channels;
        [(3, b), (b, 2 * b), (2 * b, 4 * b)]
    }

    pub(crate) fn init_into(&self, init: &mut Init<ChaCha8Rng>) -> Result<()> {
        let b = self.arch.base_channels;
        for (name, (c_in, c_out)) in BLOCKS.iter().zip(self.widths()) {
            init.conv(&format!("{name}.l1.conv"), c_out, c_in, 3, RELU_GAIN, false)?;
            init.batch_norm(&format!("{name}.l1.bn"), c_out)?;
            init.conv(&format!("{name}.l2.conv"), c_out, c_out, 3, RELU_GAIN, false)?;
            init.batch_norm(&format!("{name}.l2.bn"), c_out)?;
        }
        init.conv("head.fc", 4 * b, 4 * b, self.arch.bottleneck(), RELU_GAIN, true)?;
        init.conv("head.cls", CLASS_COUNT, 4 * b, 1, LINEAR_GAIN, true)?;
        Ok(())
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.init_into(&mut Init { store: &mut store, rng })?;
        Ok(store)
    }

    /// `N×3×H×W` → `N×4b×H/8×W/8` features.
    pub(crate) fn trunk(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = ctx.tape.value(x).shape();
        let p = self.arch.patch_size;
        if s.len() != 4 || s[1] != 3 || s[2] < p || s[3] < p {
            return Err(TensorError::Shape {
                op: "classifier_forward",
                lhs: s.to_vec(),
                rhs: vec![s.first().copied().unwrap_or(0), 3, p, p],
            }
            .into());
        }
        let mut h = x;
        for name in BLOCKS {
            h = ctx.conv_bn_relu(&format!("{name}.l1"), h, 1)?;
            h = ctx.conv_bn_relu(&format!("{name}.l2"), h, 2)?;
        }
        Ok(h)
    }

    /// Features → `N×8×gh×gw` class logits.
    pub(crate) fn head(&self, ctx: &mut Ctx, features: Var) -> Result<Var> {
        let h = ctx.conv("head.fc", features, 1, 0, true)?;
        let h = ctx.tape.relu(h);
        Ok(ctx.conv("head.cls", h, 1, 0, true)?)
    }

    /// Record a classifier pass returning `N×8×gh×gw` logits.
    pub fn logits_on_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var, train: bool, requires_grad: bool) -> Result<Var> {
        let mut ctx = ctx(tape, store, train, requires_grad);
        let f = self.trunk(&mut ctx, x)?;
        self.head(&mut ctx, f)
    }

    /// Inference-mode class probabilities, `N×8×gh×gw`.
    pub fn class_probs_grid(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let logits = self.logits_on_tape(&mut tape, store, x, false, false)?;
        Ok(tape.value(logits).softmax_axis1())
    }
}

fn ctx<'a>(tape: &'a mut Tape, store: &'a ParamStore, train: bool, requires_grad: bool) -> Ctx<'a> {
    Ctx {
        tape,
        store,
        requires_grad,
        bn: if train { BatchNormMode::Train } else { BatchNormMode::Eval },
        spectral: SpectralMode::Frozen,
    }
}

/// The classifier plus a transposed-conv decoder reading its bottleneck.
///
/// Parameters are the classifier's (same names, same initialization
/// stream) followed by the decoder's, so a zero reconstruction weight
/// reproduces classifier training exactly.
#[derive(Clone, Copy, Debug)]
pub struct Autoencoder {
    encoder: FsVgg,
}

const DECODER: [&str; 3] = ["dec.up1", "dec.up2", "dec.up3"];

impl Autoencoder {
    pub fn new(arch: ArchConfig) -> Result<Self> {
        Ok(Self {
            encoder: FsVgg::new(arch)?,
        })
    }

    pub fn classifier(&self) -> &FsVgg {
        &self.encoder
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
        let b = self.encoder.arch.base_channels;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng };
        self.encoder.init_into(&mut init)?;
        for (name, (c_in, c_out)) in DECODER.iter().zip([(4 * b, 2 * b), (2 * b, b), (b, b)]) {
            init.conv_transpose(&format!("{name}.tconv"), c_in, c_out, 4, 2, RELU_GAIN)?;
            init.batch_norm(&format!("{name}.bn"), c_out)?;
        }
        init.conv("dec.out", 3, b, 1, LINEAR_GAIN, true)?;
        Ok(store)
    }

    pub(crate) fn decode(&self, ctx: &mut Ctx, features: Var) -> Result<Var> {
        let mut h = features;
        for name in DECODER {
            h = ctx.up_block(name, h)?;
        }
        let h = ctx.conv("dec.out", h, 1, 0, true)?;
        Ok(ctx.tape.tanh(h))
    }

    /// Record encoder → decoder, returning the reconstruction.
    pub fn reconstruct_on_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var, train: bool, requires_grad: bool) -> Result<Var> {
        let mut ctx = ctx(tape, store, train, requires_grad);
        let f = self.encoder.trunk(&mut ctx, x)?;
        self.decode(&mut ctx, f)
    }

    /// Record one shared encoder pass feeding both heads:
    /// `(reconstruction, N×8×gh×gw logits)`.
    pub fn forward_on_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var, train: bool, requires_grad: bool) -> Result<(Var, Var)> {
        let mut ctx = ctx(tape, store, train, requires_grad);
        let f = self.encoder.trunk(&mut ctx, x)?;
        let recon = self.decode(&mut ctx, f)?;
        let logits = self.encoder.head(&mut ctx, f)?;
        Ok((recon, logits))
    }

    /// Inference-mode `(reconstruction, N×8 class probabilities)` for
    /// patch-sized inputs.
    pub fn evaluate(&self, store: &ParamStore, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let (recon, logits) = self.forward_on_tape(&mut tape, store, x, false, false)?;
        let n = images.shape()[0];
        let probs = tape.value(logits).softmax_axis1();
        let cells = probs.numel() / (n * CLASS_COUNT);
        if cells != 1 {
            return Err(TensorError::Invalid {
                op: "autoencoder_forward",
                msg: format!("expected patch-sized input, got {:?}", images.shape()),
            }
            .into());
        }
        Ok((tape.value(recon).clone(), probs.reshape([n, CLASS_COUNT])?))
    }
}
