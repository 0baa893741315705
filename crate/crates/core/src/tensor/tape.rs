use log::warn;

use super::kernels::{self, ConvGeom};
use super::spectral::{power_iteration_sigma, SpectralState, SIGMA_EPS};
use super::{ParamStore, Result, Tensor, TensorError};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f32 = 0.9;
const LOG_CLAMP: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and emit updated running statistics.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectralMode {
    /// Run the configured power iterations and persist the new `u`.
    Update,
    /// Derive σ̂ from the stored `u` without touching it.
    Frozen,
}

enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, geom: ConvGeom },
    ConvTranspose2d { input: Var, weight: Var, geom: ConvGeom },
    ChannelBias { input: Var, bias: Var },
    Linear { input: Var, weight: Var, bias: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32>, train: bool },
    Relu(Var),
    LeakyRelu(Var, f32),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    SliceRows { input: Var, start: usize },
    SpectralNorm { weight: Var, u: Vec<f32>, v: Vec<f32>, sigma: f32 },
    Add(Var, Var),
    Scale(Var, f32),
    Mean(Var),
    WeightedSum { input: Var, weights: Vec<f32> },
    Bce { pred: Var, target: Vec<f32> },
    CrossEntropy { probs: Var, target: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, target: Vec<usize>, probs: Vec<f32> },
    Mse { pred: Var, target: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-forward-pass record of differentiable operations.
///
/// Parameters are pulled in by name with [`Tape::param`]; buffer updates
/// produced during the pass (running statistics, power-iteration vectors) are
/// queued and applied by the caller via [`ParamStore`] once the pass is done.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(String, Var)>,
    buffer_updates: Vec<(String, Tensor)>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("shape recorded with value"))
    }

    /// Add the gradient of every bound parameter into `store`.
    /// Bindings whose name is not in `store` are skipped.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) -> Result<()> {
        for (name, var) in &tape.bindings {
            if !store.contains(name) {
                continue;
            }
            if let Some(g) = self.get(*var) {
                store.accumulate_grad(name, &g)?;
            }
        }
        Ok(())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, delta: Vec<f32>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Bind a stored parameter as a leaf. It requires a gradient only if it
    /// is trainable and `requires_grad` is set.
    pub fn param(&mut self, store: &ParamStore, name: &str, requires_grad: bool) -> Result<Var> {
        let p = store.param(name)?;
        let var = self.leaf(p.value.clone(), requires_grad && p.trainable);
        self.bindings.push((name.to_string(), var));
        Ok(var)
    }

    pub fn queue_buffer_update(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffer_updates.push((name.into(), value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Apply queued buffer updates to `store`, skipping names it does not own.
    pub fn flush_buffers_into(&mut self, store: &mut ParamStore) -> Result<()> {
        let mut rest = Vec::new();
        for (name, value) in self.take_buffer_updates() {
            if store.contains(&name) {
                store.set(&name, value)?;
            } else {
                rest.push((name, value));
            }
        }
        self.buffer_updates = rest;
        Ok(())
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.value(input).shape(), self.value(weight).shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err("conv2d", xs, ws));
        }
        let (ho, wo) = match (
            kernels::conv_out_extent(xs[2], ws[2], stride, padding),
            kernels::conv_out_extent(xs[3], ws[3], stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(shape_err("conv2d", xs, ws)),
        };
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k: ws[2],
            stride,
            pad: padding,
            ho,
            wo,
        };
        let out = kernels::conv2d_forward(self.value(input).data(), self.value(weight).data(), &geom);
        let value = Tensor::new([geom.n, geom.c_out, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, geom }, &[input, weight]))
    }

    /// Weight layout `c_in × c_out × k × k`.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.value(input).shape(), self.value(weight).shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err("conv_transpose2d", xs, ws));
        }
        let (ho, wo) = match (
            kernels::conv_transpose_out_extent(xs[2], ws[2], stride, padding),
            kernels::conv_transpose_out_extent(xs[3], ws[3], stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(shape_err("conv_transpose2d", xs, ws)),
        };
        let geom = ConvGeom {
            n: xs[0],
            c_in: ws[1],
            h: ho,
            w: wo,
            c_out: ws[0],
            k: ws[2],
            stride,
            pad: padding,
            ho: xs[2],
            wo: xs[3],
        };
        let out = kernels::conv_transpose_forward(self.value(input).data(), self.value(weight).data(), &geom);
        let value = Tensor::new([geom.n, geom.c_in, ho, wo], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { input, weight, geom }, &[input, weight]))
    }

    /// Adds `bias[c]` to every element of channel `c` of an `N×C×…` tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.value(input).shape(), self.value(bias).shape());
        if xs.len() < 2 || bs != [xs[1]] {
            return Err(shape_err("channel_bias", xs, bs));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let mut value = self.value(input).clone();
        let b = self.value(bias).data().to_vec();
        for (i, chunk) in value.data_mut().chunks_mut(inner).enumerate() {
            let add = b[i % c];
            chunk.iter_mut().for_each(|x| *x += add);
        }
        debug_assert_eq!(value.numel(), n * c * inner);
        Ok(self.push(value, Op::ChannelBias { input, bias }, &[input, bias]))
    }

    /// `x·Wᵀ + b` for `x: N×F`, `W: O×F`, `b: O`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(shape_err("linear", xs, ws));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        kernels::gemm(n, f, o, self.value(input).data(), false, self.value(weight).data(), true, 1.0, &mut out);
        let value = Tensor::new([n, o], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, &[input, weight, bias]))
    }

    /// Per-channel batch normalization over batch and spatial axes.
    ///
    /// In train mode returns the updated `(running_mean, running_var)`
    /// (momentum 0.9, biased batch variance) for the caller to persist.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        mode: BatchNormMode,
    ) -> Result<(Var, Option<(Tensor, Tensor)>)> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() < 2 {
            return Err(shape_err("batch_norm", &xs, &[]));
        }
        let (n, c) = (xs[0], xs[1]);
        for t in [self.value(gamma), self.value(beta), running_mean, running_var] {
            if t.shape() != [c] {
                return Err(shape_err("batch_norm", &xs, t.shape()));
            }
        }
        let inner: usize = xs[2..].iter().product();
        let x = self.value(input).data();
        let m = (n * inner) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        match mode {
            BatchNormMode::Train => {
                for (i, chunk) in x.chunks(inner).enumerate() {
                    mean[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                }
                mean.iter_mut().for_each(|s| *s /= m);
                for (i, chunk) in x.chunks(inner).enumerate() {
                    let mu = mean[i % c];
                    var[i % c] += chunk.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
                }
                var.iter_mut().for_each(|s| *s /= m);
            }
            BatchNormMode::Eval => {
                for ch in 0..c {
                    mean[ch] = running_mean.data()[ch] as f64;
                    var[ch] = running_var.data()[ch] as f64;
                }
            }
        }
        let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + BN_EPS).sqrt()) as f32).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for (i, (src, (xh, dst))) in x
            .chunks(inner)
            .zip(xhat.chunks_mut(inner).zip(out.chunks_mut(inner)))
            .enumerate()
        {
            let ch = i % c;
            let (mu, is) = (mean[ch] as f32, inv_std[ch]);
            for ((s, h), d) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
                *h = (s - mu) * is;
                *d = g[ch] * *h + b[ch];
            }
        }
        let updated = (mode == BatchNormMode::Train).then(|| {
            let rm = Tensor::from_fn([c], |i| {
                BN_MOMENTUM * running_mean.data()[i] + (1.0 - BN_MOMENTUM) * mean[i] as f32
            });
            let rv = Tensor::from_fn([c], |i| {
                BN_MOMENTUM * running_var.data()[i] + (1.0 - BN_MOMENTUM) * var[i] as f32
            });
            (rm, rv)
        });
        let value = Tensor::new(xs, out)?;
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            train: mode == BatchNormMode::Train,
        };
        Ok((self.push(value, op, &[input, gamma, beta]), updated))
    }

    fn map_unary(&mut self, input: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let mut value = self.value(input).clone();
        value.data_mut().iter_mut().for_each(|x| *x = f(*x));
        self.push(value, op, &[input])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.map_unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Tanh(x), f32::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    /// Row-wise softmax of an `N×C` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(shape_err("softmax", t.shape(), &[]));
        }
        check_finite(t, "softmax")?;
        let value = t.softmax_axis1();
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// `N×C×H×W` → `N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", xs, &[]));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let data: Vec<f32> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let value = Tensor::new([n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if start >= end || end > xs[0] {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("range {start}..{end} outside leading extent {}", xs[0]),
            });
        }
        let inner: usize = xs[1..].iter().product();
        let data = self.value(x).data()[start * inner..end * inner].to_vec();
        let mut shape = xs;
        shape[0] = end - start;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SliceRows { input: x, start }, &[x]))
    }

    /// `W / σ̂(W)` with `W` viewed as `shape[0] × rest`. The gradient treats
    /// `u` and `v` as constants, so `∂σ̂/∂W = u vᵀ`.
    pub fn spectral_normalize(&mut self, weight: Var, state: &mut SpectralState, mode: SpectralMode) -> Result<Var> {
        let w = self.value(weight);
        let rows = w.shape()[0];
        let cols = w.numel() / rows;
        if state.u.len() != rows {
            return Err(shape_err("spectral_normalize", w.shape(), &[state.u.len()]));
        }
        let iterations = match mode {
            SpectralMode::Update => state.iterations.max(1),
            SpectralMode::Frozen => 0,
        };
        let (mut sigma, v) = power_iteration_sigma(w.data(), rows, cols, &mut state.u, iterations);
        if !(sigma > SIGMA_EPS) {
            warn!("spectral_normalize: σ̂ = {sigma} for a (near-)zero weight, clamped to {SIGMA_EPS}");
            sigma = SIGMA_EPS;
        }
        let mut value = w.clone();
        value.data_mut().iter_mut().for_each(|x| *x /= sigma);
        let op = Op::SpectralNorm {
            weight,
            u: state.u.clone(),
            v,
            sigma,
        };
        Ok(self.push(value, op, &[weight]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        }
        let mut value = ta.clone();
        value.data_mut().iter_mut().zip(tb.data()).for_each(|(x, y)| *x += y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        self.map_unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m as f32), Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        self.weighted_sum(x, &vec![1.0; n]).expect("weights sized to input")
    }

    /// `Σ xᵢ·wᵢ` with constant weights, accumulated in f64.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f32]) -> Result<Var> {
        let t = self.value(x);
        if t.numel() != weights.len() {
            return Err(shape_err("weighted_sum", t.shape(), &[weights.len()]));
        }
        let s: f64 = t
            .data()
            .iter()
            .zip(weights)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let op = Op::WeightedSum {
            input: x,
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(s as f32), op, &[x]))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    pub fn binary_cross_entropy(&mut self, pred: Var, target: &[f32]) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != target.len() {
            return Err(shape_err("binary_cross_entropy", p.shape(), &[target.len()]));
        }
        check_finite(p, "binary_cross_entropy")?;
        let loss = p
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let p = (p as f64).clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                -(t as f64 * p.ln() + (1.0 - t as f64) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / target.len() as f64;
        let op = Op::Bce {
            pred,
            target: target.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss as f32), op, &[pred]))
    }

    fn check_targets(&self, x: Var, target: &[usize], op: &'static str) -> Result<(usize, usize)> {
        let xs = self.value(x).shape();
        if xs.len() != 2 || xs[0] != target.len() {
            return Err(shape_err(op, xs, &[target.len()]));
        }
        if let Some(bad) = target.iter().find(|&&t| t >= xs[1]) {
            return Err(TensorError::Invalid {
                op,
                msg: format!("class index {bad} out of range for {} classes", xs[1]),
            });
        }
        check_finite(self.value(x), op)?;
        Ok((xs[0], xs[1]))
    }

    /// Mean categorical cross-entropy of an `N×C` probability matrix.
    pub fn cross_entropy(&mut self, probs: Var, target: &[usize]) -> Result<Var> {
        let (_, c) = self.check_targets(probs, target, "cross_entropy")?;
        let p = self.value(probs).data();
        let loss = target
            .iter()
            .enumerate()
            .map(|(i, &t)| -(p[i * c + t] as f64).max(LOG_CLAMP).ln())
            .sum::<f64>()
            / target.len() as f64;
        let op = Op::CrossEntropy {
            probs,
            target: target.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss as f32), op, &[probs]))
    }

    /// Softmax followed by categorical cross-entropy, fused for stability.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &[usize]) -> Result<Var> {
        let (n, c) = self.check_targets(logits, target, "softmax_cross_entropy")?;
        let z = self.value(logits).data();
        let mut probs = vec![0.0f32; n * c];
        let mut loss = 0.0f64;
        for (i, &t) in target.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let total: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            for k in 0..c {
                probs[i * c + k] = ((row[k] as f64 - max).exp() / total) as f32;
            }
            let log_p = row[t] as f64 - max - total.ln();
            loss -= log_p.max(LOG_CLAMP.ln());
        }
        let op = Op::SoftmaxCrossEntropy {
            logits,
            target: target.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar((loss / n as f64) as f32), op, &[logits]))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(shape_err("mean_squared_error", p.shape(), target.shape()));
        }
        check_finite(p, "mean_squared_error")?;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / p.numel() as f64;
        let op = Op::Mse {
            pred,
            target: target.data().to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss as f32), op, &[pred]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    dy,
                    geom,
                    self.wants(*input),
                    self.wants(*weight),
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads[input.0], dx);
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads[weight.0], dw);
                }
            }
            Op::ConvTranspose2d { input, weight, geom } => {
                let (dx, dw) = kernels::conv_transpose_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    dy,
                    geom,
                    self.wants(*input),
                    self.wants(*weight),
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads[input.0], dx);
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads[weight.0], dw);
                }
            }
            Op::ChannelBias { input, bias } => {
                if self.wants(*bias) {
                    let xs = self.value(*input).shape();
                    let c = xs[1];
                    let inner: usize = xs[2..].iter().product();
                    let mut db = vec![0.0f64; c];
                    for (i, chunk) in dy.chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                    }
                    accumulate(&mut grads[bias.0], db.into_iter().map(|v| v as f32).collect());
                }
                if self.wants(*input) {
                    accumulate(&mut grads[input.0], dy.to_vec());
                }
            }
            Op::Linear { input, weight, bias } => {
                let xs = self.value(*input).shape();
                let (n, f) = (xs[0], xs[1]);
                let o = self.value(*weight).shape()[0];
                if self.wants(*input) {
                    let mut dx = vec![0.0f32; n * f];
                    kernels::gemm(n, o, f, dy, false, self.value(*weight).data(), false, 0.0, &mut dx);
                    accumulate(&mut grads[input.0], dx);
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0f32; o * f];
                    kernels::gemm(o, n, f, dy, true, self.value(*input).data(), false, 0.0, &mut dw);
                    accumulate(&mut grads[weight.0], dw);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0f32; o];
                    for row in dy.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate(&mut grads[bias.0], db);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xs = self.value(*input).shape();
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                let m = (xs[0] * inner) as f64;
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for (i, (d, h)) in dy.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                    let ch = i % c;
                    for (&dv, &hv) in d.iter().zip(h) {
                        sum_dy[ch] += dv as f64;
                        sum_dy_xhat[ch] += dv as f64 * hv as f64;
                    }
                }
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], sum_dy_xhat.iter().map(|&v| v as f32).collect());
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], sum_dy.iter().map(|&v| v as f32).collect());
                }
                if self.wants(*input) {
                    let g = self.value(*gamma).data();
                    let mut dx = vec![0.0f32; dy.len()];
                    for (i, ((d, h), out)) in dy
                        .chunks(inner)
                        .zip(xhat.chunks(inner))
                        .zip(dx.chunks_mut(inner))
                        .enumerate()
                    {
                        let ch = i % c;
                        let scale = g[ch] as f64 * inv_std[ch] as f64;
                        if *train {
                            let (sd, sdh) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                            for ((o, &dv), &hv) in out.iter_mut().zip(d).zip(h) {
                                *o = (scale * (dv as f64 - sd - hv as f64 * sdh)) as f32;
                            }
                        } else {
                            for (o, &dv) in out.iter_mut().zip(d) {
                                *o = (scale * dv as f64) as f32;
                            }
                        }
                    }
                    accumulate(&mut grads[input.0], dx);
                }
            }
            Op::Relu(x) => {
                let d = dy.iter().zip(y).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
                accumulate(&mut grads[x.0], d);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let d = dy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > 0.0 { g } else { slope * g })
                    .collect();
                accumulate(&mut grads[x.0], d);
            }
            Op::Tanh(x) => {
                let d = dy.iter().zip(y).map(|(&g, &v)| g * (1.0 - v * v)).collect();
                accumulate(&mut grads[x.0], d);
            }
            Op::Sigmoid(x) => {
                let d = dy.iter().zip(y).map(|(&g, &v)| g * v * (1.0 - v)).collect();
                accumulate(&mut grads[x.0], d);
            }
            Op::Softmax(x) => {
                let c = node.value.shape()[1];
                let mut d = vec![0.0f32; dy.len()];
                for ((dr, yr), out) in dy.chunks(c).zip(y.chunks(c)).zip(d.chunks_mut(c)) {
                    let dot: f64 = dr.iter().zip(yr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for ((o, &g), &p) in out.iter_mut().zip(dr).zip(yr) {
                        *o = (p as f64 * (g as f64 - dot)) as f32;
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape();
                let hw = xs[2] * xs[3];
                let mut d = Vec::with_capacity(dy.len() * hw);
                for &g in dy {
                    d.extend(std::iter::repeat(g / hw as f32).take(hw));
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], dy.to_vec()),
            Op::SliceRows { input, start } => {
                let xt = self.value(*input);
                let inner: usize = xt.shape()[1..].iter().product();
                let mut d = vec![0.0f32; xt.numel()];
                d[start * inner..start * inner + dy.len()].copy_from_slice(dy);
                accumulate(&mut grads[input.0], d);
            }
            Op::SpectralNorm { weight, u, v, sigma } => {
                let w = self.value(*weight).data();
                let cols = v.len();
                let s = *sigma as f64;
                let gw: f64 = dy.iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum();
                let coeff = gw / (s * s);
                let d = dy
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        let (r, col) = (i / cols, i % cols);
                        (g as f64 / s - coeff * u[r] as f64 * v[col] as f64) as f32
                    })
                    .collect();
                accumulate(&mut grads[weight.0], d);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], dy.to_vec());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], dy.to_vec());
                }
            }
            Op::Scale(x, factor) => {
                accumulate(&mut grads[x.0], dy.iter().map(|g| g * factor).collect());
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                accumulate(&mut grads[x.0], vec![dy[0] / n as f32; n]);
            }
            Op::WeightedSum { input, weights } => {
                accumulate(&mut grads[input.0], weights.iter().map(|w| w * dy[0]).collect());
            }
            Op::Bce { pred, target } => {
                let p = self.value(*pred).data();
                let n = target.len() as f64;
                let d = p
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let p = (p as f64).clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                        let t = t as f64;
                        ((-t / p + (1.0 - t) / (1.0 - p)) / n * dy[0] as f64) as f32
                    })
                    .collect();
                accumulate(&mut grads[pred.0], d);
            }
            Op::CrossEntropy { probs, target } => {
                let pt = self.value(*probs);
                let c = pt.shape()[1];
                let n = target.len() as f64;
                let mut d = vec![0.0f32; pt.numel()];
                for (i, &t) in target.iter().enumerate() {
                    let p = (pt.data()[i * c + t] as f64).max(LOG_CLAMP);
                    d[i * c + t] = (-dy[0] as f64 / (p * n)) as f32;
                }
                accumulate(&mut grads[probs.0], d);
            }
            Op::SoftmaxCrossEntropy { logits, target, probs } => {
                let c = self.value(*logits).shape()[1];
                let n = target.len() as f32;
                let mut d: Vec<f32> = probs.iter().map(|p| p * dy[0] / n).collect();
                for (i, &t) in target.iter().enumerate() {
                    d[i * c + t] -= dy[0] / n;
                }
                accumulate(&mut grads[logits.0], d);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let n = p.len() as f32;
                let d = p
                    .iter()
                    .zip(target)
                    .map(|(&a, &b)| 2.0 * (a - b) / n * dy[0])
                    .collect();
                accumulate(&mut grads[pred.0], d);
            }
        }
    }
}
