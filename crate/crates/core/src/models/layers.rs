//! Parameter creation and layer binding shared by the architectures.

use rand::Rng;

use crate::tensor::{BatchNormMode, ParamStore, Result, SpectralMode, SpectralState, Tape, Tensor, Var};

pub(crate) const RELU_GAIN: f32 = std::f32::consts::SQRT_2;
pub(crate) const LINEAR_GAIN: f32 = 1.0;
pub(crate) const LEAKY_SLOPE: f32 = 0.2;

/// Creates parameters in a fixed order so that initialization is a pure
/// function of the RNG stream.
pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// Centered uniform with variance `gain² / fan_in`.
    fn uniform(&mut self, shape: Vec<usize>, fan_in: usize, gain: f32) -> Tensor {
        let a = gain * (3.0 / fan_in as f32).sqrt();
        Tensor::from_fn(shape, |_| self.rng.gen_range(-a..a))
    }

    pub fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, gain: f32, bias: bool) -> Result<()> {
        let w = self.uniform(vec![c_out, c_in, k, k], c_in * k * k, gain);
        self.store.insert(format!("{name}.weight"), w, true)?;
        if bias {
            self.store.insert(format!("{name}.bias"), Tensor::zeros([c_out]), true)?;
        }
        Ok(())
    }

    /// Transposed-conv weight `c_in × c_out × k × k`; each output pixel sums
    /// `c_in·k²/stride²` products.
    pub fn conv_transpose(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, gain: f32) -> Result<()> {
        let fan_in = (c_in * k * k / (stride * stride)).max(1);
        let w = self.uniform(vec![c_in, c_out, k, k], fan_in, gain);
        self.store.insert(format!("{name}.weight"), w, true)
    }

    pub fn linear(&mut self, name: &str, out: usize, inp: usize, gain: f32) -> Result<()> {
        let w = self.uniform(vec![out, inp], inp, gain);
        self.store.insert(format!("{name}.weight"), w, true)?;
        self.store.insert(format!("{name}.bias"), Tensor::zeros([out]), true)
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.store.insert(format!("{name}.gamma"), Tensor::full([c], 1.0), true)?;
        self.store.insert(format!("{name}.beta"), Tensor::zeros([c]), true)?;
        self.store.insert(format!("{name}.running_mean"), Tensor::zeros([c]), false)?;
        self.store.insert(format!("{name}.running_var"), Tensor::full([c], 1.0), false)
    }

    /// Singular-vector buffer for a spectrally normalized weight with
    /// `rows` output channels.
    pub fn spectral(&mut self, name: &str, rows: usize) -> Result<()> {
        let state = SpectralState::new(rows, self.rng);
        self.store.insert(format!("{name}.u"), Tensor::new([rows], state.u)?, false)
    }
}

/// Forward-pass context: which store to read, whether parameters take
/// gradients, and the batch-norm / spectral-norm modes.
pub(crate) struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub requires_grad: bool,
    pub bn: BatchNormMode,
    pub spectral: SpectralMode,
}

impl Ctx<'_> {
    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.tape.param(self.store, name, self.requires_grad)
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let y = self.tape.conv2d(x, w, stride, pad)?;
        if bias {
            let b = self.param(&format!("{name}.bias"))?;
            self.tape.channel_bias(y, b)
        } else {
            Ok(y)
        }
    }

    /// Convolution whose weight passes through spectral normalization. The
    /// updated singular vector is queued as a buffer update in update mode.
    pub fn spectral_conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let u_name = format!("{name}.u");
        let mut state = SpectralState::from_u(self.store.get(&u_name)?.data().to_vec());
        let w = self.tape.spectral_normalize(w, &mut state, self.spectral)?;
        if self.spectral == SpectralMode::Update {
            let rows = state.u.len();
            self.tape.queue_buffer_update(u_name, Tensor::new([rows], state.u)?);
        }
        let y = self.tape.conv2d(x, w, stride, pad)?;
        let b = self.param(&format!("{name}.bias"))?;
        self.tape.channel_bias(y, b)
    }

    pub fn conv_transpose(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        self.tape.conv_transpose2d(x, w, stride, pad)
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        self.tape.linear(x, w, b)
    }

    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let rm_name = format!("{name}.running_mean");
        let rv_name = format!("{name}.running_var");
        let (y, updated) = self.tape.batch_norm(
            x,
            gamma,
            beta,
            self.store.get(&rm_name)?,
            self.store.get(&rv_name)?,
            self.bn,
        )?;
        if let Some((rm, rv)) = updated {
            self.tape.queue_buffer_update(rm_name, rm);
            self.tape.queue_buffer_update(rv_name, rv);
        }
        Ok(y)
    }

    pub fn conv_bn_relu(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv(&format!("{name}.conv"), x, stride, 1, false)?;
        let y = self.batch_norm(&format!("{name}.bn"), y)?;
        Ok(self.tape.relu(y))
    }

    /// Stride-2, kernel-4 transposed conv doubling the extent, then BN + relu.
    pub fn up_block(&mut self, name: &str, x: Var) -> Result<Var> {
        let y = self.conv_transpose(&format!("{name}.tconv"), x, 2, 1)?;
        let y = self.batch_norm(&format!("{name}.bn"), y)?;
        Ok(self.tape.relu(y))
    }
}
