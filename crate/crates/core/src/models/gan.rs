use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::layers::{Ctx, Init, LEAKY_SLOPE, LINEAR_GAIN, RELU_GAIN};
use super::{ArchConfig, ClassLabel, Result, CLASS_COUNT};
use crate::tensor::{BatchNormMode, ParamStore, SpectralMode, Tape, Tensor, TensorError, Var};

/// One generator input: standard-normal noise and a class.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorInput {
    pub z: Vec<f32>,
    pub class: ClassLabel,
}

impl GeneratorInput {
    pub fn sample<R: Rng>(rng: &mut R, noise_dim: usize, class: ClassLabel) -> Self {
        Self {
            z: (0..noise_dim).map(|_| rng.sample(StandardNormal)).collect(),
            class,
        }
    }

    pub fn one_hot(&self) -> [f32; CLASS_COUNT] {
        let mut c = [0.0; CLASS_COUNT];
        c[self.class.index()] = 1.0;
        c
    }
}

/// `n × noise_dim` standard-normal noise.
pub fn noise_batch<R: Rng>(rng: &mut R, n: usize, noise_dim: usize) -> Tensor {
    Tensor::from_fn([n, noise_dim], |_| rng.sample(StandardNormal))
}

/// Class-conditioned generator: z ⊕ one-hot(c) → 3×p×p image in [−1, 1].
#[derive(Clone, Copy, Debug)]
pub struct Generator {
    arch: ArchConfig,
}

impl Generator {
    pub fn new(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
        let b = self.arch.base_channels;
        let s0 = self.arch.bottleneck();
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng };
        init.linear("g.fc", 4 * b * s0 * s0, self.arch.noise_dim + CLASS_COUNT, RELU_GAIN)?;
        init.batch_norm("g.fc_bn", 4 * b)?;
        for (name, c_in, c_out) in [("g.up1", 4 * b, 2 * b), ("g.up2", 2 * b, b), ("g.up3", b, b)] {
            init.conv_transpose(&format!("{name}.tconv"), c_in, c_out, 4, 2, RELU_GAIN)?;
            init.batch_norm(&format!("{name}.bn"), c_out)?;
        }
        init.conv("g.out", 3, b, 1, LINEAR_GAIN, true)?;
        Ok(store)
    }

    /// Generator input matrix: noise rows followed by the one-hot class.
    pub fn input_matrix(&self, z: &Tensor, classes: &[usize]) -> Result<Tensor> {
        let nd = self.arch.noise_dim;
        if z.rank() != 2 || z.shape()[1] != nd || z.shape()[0] != classes.len() {
            return Err(TensorError::Shape {
                op: "generator_forward",
                lhs: z.shape().to_vec(),
                rhs: vec![classes.len(), nd],
            }
            .into());
        }
        if let Some(bad) = classes.iter().find(|&&c| c >= CLASS_COUNT) {
            return Err(TensorError::Invalid {
                op: "generator_forward",
                msg: format!("class index {bad} out of range"),
            }
            .into());
        }
        let width = nd + CLASS_COUNT;
        let mut data = vec![0.0f32; classes.len() * width];
        for (i, &c) in classes.iter().enumerate() {
            data[i * width..i * width + nd].copy_from_slice(&z.data()[i * nd..(i + 1) * nd]);
            data[i * width + nd + c] = 1.0;
        }
        Ok(Tensor::new([classes.len(), width], data)?)
    }

    pub(crate) fn forward(&self, ctx: &mut Ctx, z: &Tensor, classes: &[usize]) -> Result<Var> {
        let b = self.arch.base_channels;
        let s0 = self.arch.bottleneck();
        let n = classes.len();
        let input = ctx.tape.constant(self.input_matrix(z, classes)?);
        let h = ctx.linear("g.fc", input)?;
        let h = ctx.tape.reshape(h, [n, 4 * b, s0, s0])?;
        let h = ctx.batch_norm("g.fc_bn", h)?;
        let mut h = ctx.tape.relu(h);
        for name in ["g.up1", "g.up2", "g.up3"] {
            h = ctx.up_block(name, h)?;
        }
        let h = ctx.conv("g.out", h, 1, 0, true)?;
        Ok(ctx.tape.tanh(h))
    }

    /// Record a generator pass on `tape`. `train` selects batch statistics
    /// (and queues running-stat updates) versus running statistics.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: &Tensor,
        classes: &[usize],
        train: bool,
        requires_grad: bool,
    ) -> Result<Var> {
        let mut ctx = Ctx {
            tape,
            store,
            requires_grad,
            bn: if train { BatchNormMode::Train } else { BatchNormMode::Eval },
            spectral: SpectralMode::Frozen,
        };
        self.forward(&mut ctx, z, classes)
    }

    /// Inference-mode images for a batch of inputs.
    pub fn generate(&self, store: &ParamStore, inputs: &[GeneratorInput]) -> Result<Tensor> {
        let nd = self.arch.noise_dim;
        let mut z = Vec::with_capacity(inputs.len() * nd);
        for inp in inputs {
            if inp.z.len() != nd {
                return Err(TensorError::Shape {
                    op: "generator_forward",
                    lhs: vec![inp.z.len()],
                    rhs: vec![nd],
                }
                .into());
            }
            z.extend_from_slice(&inp.z);
        }
        let z = Tensor::new([inputs.len(), nd], z)?;
        let classes: Vec<usize> = inputs.iter().map(|i| i.class.index()).collect();
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, store, &z, &classes, false, false)?;
        Ok(tape.value(out).clone())
    }
}

/// Discriminator outputs for a batch.
#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    /// `P(S = real | X)` per image.
    pub source_prob: Vec<f32>,
    /// `N×8` class distribution.
    pub class_probs: Tensor,
}

/// Shared spectrally normalized trunk with a source head and a class head.
#[derive(Clone, Copy, Debug)]
pub struct Discriminator {
    arch: ArchConfig,
}

const D_BLOCKS: [&str; 3] = ["d.conv1", "d.conv2", "d.conv3"];

impl Discriminator {
    pub fn new(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
        let b = self.arch.base_channels;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng };
        let widths = [(3, b), (b, 2 * b), (2 * b, 4 * b)];
        for (name, (c_in, c_out)) in D_BLOCKS.iter().zip(widths) {
            init.conv(name, c_out, c_in, 4, RELU_GAIN, true)?;
            init.spectral(name, c_out)?;
        }
        init.linear("d.src", 1, 4 * b, LINEAR_GAIN)?;
        init.linear("d.cls", CLASS_COUNT, 4 * b, LINEAR_GAIN)?;
        Ok(store)
    }

    /// Returns `(source probability N×1, class logits N×8)`.
    pub(crate) fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let p = self.arch.patch_size;
        let s = ctx.tape.value(x).shape();
        if s.len() != 4 || s[1] != 3 || s[2] != p || s[3] != p {
            return Err(TensorError::Shape {
                op: "discriminator_forward",
                lhs: s.to_vec(),
                rhs: vec![s.first().copied().unwrap_or(0), 3, p, p],
            }
            .into());
        }
        let mut h = x;
        for name in D_BLOCKS {
            h = ctx.spectral_conv(name, h, 2, 1)?;
            h = ctx.tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let features = ctx.tape.global_avg_pool(h)?;
        let src = ctx.linear("d.src", features)?;
        let src = ctx.tape.sigmoid(src);
        let cls = ctx.linear("d.cls", features)?;
        Ok((src, cls))
    }

    /// Record a discriminator pass. `update_spectral` runs one power
    /// iteration per weight and queues the new singular vectors.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        update_spectral: bool,
        requires_grad: bool,
    ) -> Result<(Var, Var)> {
        let mut ctx = Ctx {
            tape,
            store,
            requires_grad,
            bn: BatchNormMode::Eval,
            spectral: if update_spectral {
                SpectralMode::Update
            } else {
                SpectralMode::Frozen
            },
        };
        self.forward(&mut ctx, x)
    }

    pub fn evaluate(&self, store: &ParamStore, images: &Tensor) -> Result<DiscriminatorOutput> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let (src, cls) = self.forward_on_tape(&mut tape, store, x, false, false)?;
        Ok(DiscriminatorOutput {
            source_prob: tape.value(src).data().to_vec(),
            class_probs: tape.value(cls).softmax_axis1(),
        })
    }
}
