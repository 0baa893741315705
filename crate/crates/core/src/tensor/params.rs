use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// One named parameter or buffer with its optimizer state.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    /// Buffers (running statistics, singular vectors) are not trainable.
    pub trainable: bool,
    first_moment: Vec<f32>,
    second_moment: Vec<f32>,
    step: u64,
}

impl Param {
    fn new(value: Tensor, trainable: bool) -> Self {
        let n = if trainable { value.numel() } else { 0 };
        Self {
            value,
            grad: None,
            trainable,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f32], &[f32]) {
        (&self.first_moment, &self.second_moment)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// Named parameters keyed by dot-separated path, iterated in sorted order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.params.insert(name, Param::new(value, trainable));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.param(name).map(|p| &p.value)
    }

    /// Replace a value in place, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "ParamStore::set",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if p.value.shape() != grad.shape() {
            return Err(TensorError::Shape {
                op: "accumulate_grad",
                lhs: p.value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        match &mut p.grad {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .for_each(|(a, b)| *a += b),
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    /// Apply one bias-corrected Adam update to every trainable parameter,
    /// then clear gradients. Every trainable parameter must carry a gradient.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(TensorError::MissingGradient(name.clone()));
        }
        for p in self.params.values_mut().filter(|p| p.trainable) {
            let grad = p.grad.take().expect("checked above");
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
            let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grad.data()[i];
                let m = cfg.beta1 * p.first_moment[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.second_moment[i] + (1.0 - cfg.beta2) * g * g;
                p.first_moment[i] = m;
                p.second_moment[i] = v;
                let m_hat = m as f64 / bc1;
                let v_hat = v as f64 / bc2;
                values[i] -= (cfg.lr as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
            }
        }
        self.zero_grads();
        Ok(())
    }

    /// Values only, for checkpoints and equality checks.
    pub fn snapshot(&self) -> Vec<(String, Tensor, bool)> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone(), p.trainable))
            .collect()
    }

    pub fn from_snapshot(entries: Vec<(String, Tensor, bool)>) -> Result<Self> {
        let mut store = Self::new();
        for (name, value, trainable) in entries {
            store.insert(name, value, trainable)?;
        }
        Ok(store)
    }

    /// Bitwise equality of names and values.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| {
                    ka == kb
                        && a.value.shape() == b.value.shape()
                        && a.value
                            .data()
                            .iter()
                            .zip(b.value.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(value), true).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        };
        for g in [0.3f32, -2.0, 7.5] {
            let mut s = scalar_store(0.5);
            s.accumulate_grad("w", &Tensor::scalar(g)).unwrap();
            s.adam_step(&cfg).unwrap();
            let moved = 0.5 - s.get("w").unwrap().data()[0];
            let expected = cfg.lr * g / (g.abs() + cfg.eps);
            assert!((moved - expected).abs() < 1e-7, "{moved} vs {expected}");
        }
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut s = scalar_store(0.25);
        s.accumulate_grad("w", &Tensor::scalar(0.0)).unwrap();
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 0.25);
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        let cfg = AdamConfig::default();
        let g = 0.7f64;
        let (b1, b2, lr, eps) = (cfg.beta1 as f64, cfg.beta2 as f64, cfg.lr as f64, cfg.eps as f64);
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        let mut s = scalar_store(0.5);
        for _ in 0..2 {
            s.accumulate_grad("w", &Tensor::scalar(g as f32)).unwrap();
            s.adam_step(&cfg).unwrap();
        }
        let got = s.get("w").unwrap().data()[0] as f64;
        assert!((got - p).abs() < 1e-7, "{got} vs {p}");
        assert_eq!(s.param("w").unwrap().step(), 2);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        s.insert("buffer", Tensor::scalar(0.0), false).unwrap();
        match s.adam_step(&AdamConfig::default()) {
            Err(TensorError::MissingGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = scalar_store(1.0);
        assert!(matches!(
            s.insert("w", Tensor::scalar(2.0), true),
            Err(TensorError::DuplicateParam(_))
        ));
    }

    #[test]
    fn adam_is_bitwise_deterministic() {
        let run = || {
            let mut s = ParamStore::new();
            s.insert("a", Tensor::from_fn([3, 4], |i| (i as f32 * 0.37).sin()), true)
                .unwrap();
            for step in 0..5 {
                let g = Tensor::from_fn([3, 4], |i| ((i + step) as f32 * 1.3).cos());
                s.accumulate_grad("a", &g).unwrap();
                s.adam_step(&AdamConfig::default()).unwrap();
            }
            s
        };
        assert!(run().same_values(&run()));
    }
}
