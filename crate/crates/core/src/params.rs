//! Named trainable parameters, detached gradient buffers and Adam.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::TensorD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Parameters in registration order, each with a gradient slot of the same
/// shape.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<TensorD>,
    grads: Vec<TensorD>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: TensorD) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = self.names.len();
        self.grads.push(TensorD::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &TensorD {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut TensorD {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &TensorD {
        &self.grads[id.0]
    }

    pub fn get(&self, name: &str) -> Result<&TensorD> {
        Ok(self.value(self.id(name)?))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut TensorD> {
        let id = self.id(name)?;
        Ok(self.value_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &TensorD)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(TensorD::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn zeros_like_grads(&self) -> Gradients {
        Gradients(self.values.iter().map(|v| TensorD::zeros(v.shape())).collect())
    }

    /// Adds a detached gradient buffer into the gradient slots.
    pub fn accumulate(&mut self, g: &Gradients) {
        for (slot, add) in self.grads.iter_mut().zip(&g.0) {
            crate::tensor::add_assign(slot.data_mut(), add.data());
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Uniform `±1/√fan_in` initialisation.
    pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> TensorD {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        TensorD::from_vec(shape, data).expect("shape product matches")
    }
}

/// Gradient buffer detached from the store, so forward/backward passes over
/// distinct samples can run against a shared read-only store.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<TensorD>);

impl Gradients {
    pub fn slot(&mut self, id: ParamId) -> &mut [f64] {
        self.0[id.0].data_mut()
    }

    pub fn get(&self, id: ParamId) -> &TensorD {
        &self.0[id.0]
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            crate::tensor::add_assign(a.data_mut(), b.data());
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.0.iter_mut().for_each(|t| t.fill(v));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments are kept per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.values.iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the store's gradient slots.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (value, grad)) in params.values.iter_mut().zip(&params.grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, (w, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut ps = ParamStore::new();
        ps.register("a", TensorD::from_vec(&[2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        ps.register("b", TensorD::from_vec(&[1, 3], vec![0.5, 0.0, 3.0]).unwrap())
            .unwrap();
        ps
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = store();
        assert!(ps.register("a", TensorD::zeros(&[1])).is_err());
        assert!(matches!(ps.id("zzz"), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = store();
        let before = ps.clone();
        let mut adam = Adam::new(&ps, AdamConfig::default());
        adam.step(&mut ps);
        assert_eq!(ps, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = store();
        let mut g = ps.zeros_like_grads();
        g.fill(0.37);
        ps.accumulate(&g);
        let before = ps.clone();
        let mut adam = Adam::new(&ps, AdamConfig::default());
        adam.step(&mut ps);
        for ((_, _, a), (_, _, b)) in ps.iter().zip(before.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps)
                assert!(((y - x) - 1e-3).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut ps = store();
            let mut adam = Adam::new(&ps, AdamConfig::default());
            for k in 0..5 {
                ps.zero_grad();
                let mut g = ps.zeros_like_grads();
                g.fill(0.1 * k as f64 - 0.2);
                ps.accumulate(&g);
                adam.step(&mut ps);
            }
            ps
        };
        assert_eq!(run(), run());
    }
}
