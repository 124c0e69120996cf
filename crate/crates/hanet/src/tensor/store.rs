//! Named parameter storage with Adam state and batch-norm running stats.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reserved name prefixes. User parameters may not start with `!`; entries
/// under these prefixes ride along in checkpoints but are never trainable.
pub const BN_MEAN_PREFIX: &str = "!bn_mean!";
pub const BN_VAR_PREFIX: &str = "!bn_var!";
pub const ADAM_M_PREFIX: &str = "!adam_m!";
pub const ADAM_V_PREFIX: &str = "!adam_v!";
pub const ADAM_STEP_KEY: &str = "!adam_t";

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Weight initializer for [`ParamStore::create_init`].
pub enum Init {
    /// Uniform in +-sqrt(6 / (rows + cols)).
    Glorot,
    Zeros,
    Ones,
}

/// Trainable parameters plus auxiliary buffers (running stats, moments).
/// Shapes are fixed at creation; names are unique across both maps.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    aux: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Vec<f32>>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn create(&mut self, name: &str, mut tensor: Tensor) -> Result<()> {
        if name.starts_with('!') {
            return Err(Error::invalid(format!("parameter name {name:?} uses a reserved prefix")));
        }
        if self.params.contains_key(name) || self.aux.contains_key(name) {
            return Err(Error::invalid(format!("parameter {name:?} already exists")));
        }
        tensor.requires_grad = true;
        tensor.grad = None;
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn create_init(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut impl Rng) -> Result<()> {
        let values = match init {
            Init::Glorot => {
                let limit = (6.0 / (rows + cols) as f32).sqrt();
                (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect()
            }
            Init::Zeros => vec![0.0; rows * cols],
            Init::Ones => vec![1.0; rows * cols],
        };
        self.create(name, Tensor::matrix(rows, cols, values)?)
    }

    /// Create aux running-stat buffers for one batch-norm site if absent.
    pub fn ensure_bn_stats(&mut self, key: &str, channels: usize) -> Result<()> {
        let mean_key = format!("{BN_MEAN_PREFIX}{key}");
        let var_key = format!("{BN_VAR_PREFIX}{key}");
        if let Some(existing) = self.aux.get(&mean_key) {
            if existing.numel() != channels {
                return Err(Error::invalid(format!(
                    "batch-norm site {key:?} has {} channels, expected {channels}",
                    existing.numel()
                )));
            }
            return Ok(());
        }
        self.aux.insert(mean_key, Tensor::row(vec![0.0; channels]));
        self.aux.insert(var_key, Tensor::row(vec![1.0; channels]));
        Ok(())
    }

    /// Look up a trainable parameter only.
    pub fn trainable(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }

    /// Look up a parameter or aux buffer.
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .or_else(|| self.aux.get(name))
            .ok_or_else(|| Error::invalid(format!("unknown tensor {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        if let Some(t) = self.params.get_mut(name) {
            return Ok(t);
        }
        self.aux
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown tensor {name:?}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains_key(name) || self.aux.contains_key(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn aux_entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.aux.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    // ── gradients and the Adam update ────────────────────────────────

    /// Add a gradient contribution for one parameter.
    pub fn accumulate_grad(&mut self, name: &str, grad: &[f32]) -> Result<()> {
        let p = self.trainable(name)?;
        if p.numel() != grad.len() {
            return Err(Error::Shape { op: "accumulate_grad", lhs: p.shape.clone(), rhs: vec![grad.len()] });
        }
        match self.grads.get_mut(name) {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(grad) {
                    *e += g;
                }
            }
            None => {
                self.grads.insert(name.to_string(), grad.to_vec());
            }
        }
        Ok(())
    }

    /// Give every parameter without an accumulated gradient an all-zero one,
    /// so a full Adam step can run even when a branch saw no data.
    pub fn fill_missing_grads(&mut self) {
        for (name, p) in &self.params {
            self.grads
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.numel()]);
        }
    }

    pub fn grad(&self, name: &str) -> Option<&[f32]> {
        self.grads.get(name).map(|g| g.as_slice())
    }

    /// Bias-corrected Adam update over all parameters; clears gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for name in self.params.keys() {
            if !self.grads.contains_key(name) {
                return Err(Error::invalid(format!("adam_step: parameter {name:?} has no gradient")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = (1.0 - (cfg.beta1 as f64).powi(t)) as f32;
        let bc2 = (1.0 - (cfg.beta2 as f64).powi(t)) as f32;

        let names: Vec<String> = self.params.keys().cloned().collect();
        for name in names {
            let g = self.grads.get(&name).unwrap().clone();
            let n = g.len();
            let m_key = format!("{ADAM_M_PREFIX}{name}");
            let v_key = format!("{ADAM_V_PREFIX}{name}");
            self.aux
                .entry(m_key.clone())
                .or_insert_with(|| Tensor::row(vec![0.0; n]));
            self.aux
                .entry(v_key.clone())
                .or_insert_with(|| Tensor::row(vec![0.0; n]));

            {
                let m = self.aux.get_mut(&m_key).unwrap();
                for i in 0..n {
                    m.values[i] = cfg.beta1 * m.values[i] + (1.0 - cfg.beta1) * g[i];
                }
            }
            {
                let v = self.aux.get_mut(&v_key).unwrap();
                for i in 0..n {
                    v.values[i] = cfg.beta2 * v.values[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                }
            }
            let m = self.aux.get(&m_key).unwrap().values.clone();
            let v = self.aux.get(&v_key).unwrap().values.clone();
            let p = self.params.get_mut(&name).unwrap();
            for i in 0..n {
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.grads.clear();
        Ok(())
    }

    // ── checkpoint plumbing ──────────────────────────────────────────

    pub(crate) fn insert_raw(&mut self, name: String, tensor: Tensor) -> Result<()> {
        if name == ADAM_STEP_KEY {
            self.step = tensor.values.first().copied().unwrap_or(0.0) as u64;
            return Ok(());
        }
        let is_aux = name.starts_with('!');
        let map = if is_aux { &mut self.aux } else { &mut self.params };
        if map.contains_key(&name) {
            return Err(Error::data(format!("duplicate tensor name {name:?} in checkpoint")));
        }
        let mut tensor = tensor;
        tensor.requires_grad = !is_aux;
        map.insert(name, tensor);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_about_lr() {
        let mut store = ParamStore::new();
        store.create("p", Tensor::row(vec![1.0])).unwrap();
        store.accumulate_grad("p", &[1.0]).unwrap();
        let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        store.adam_step(&cfg).unwrap();
        // t=1: m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let p = store.get("p").unwrap().values[0];
        assert!((p - 0.9).abs() < 1e-6, "p = {p}");
    }

    #[test]
    fn zero_grad_leaves_parameter_unchanged() {
        let mut store = ParamStore::new();
        store.create("p", Tensor::row(vec![0.25])).unwrap();
        store.accumulate_grad("p", &[0.0]).unwrap();
        store.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(store.get("p").unwrap().values[0], 0.25);
    }

    #[test]
    fn adam_requires_a_gradient_per_parameter() {
        let mut store = ParamStore::new();
        store.create("p", Tensor::row(vec![1.0])).unwrap();
        store.create("q", Tensor::row(vec![1.0])).unwrap();
        store.accumulate_grad("p", &[1.0]).unwrap();
        assert!(store.adam_step(&AdamConfig::default()).is_err());
        store.fill_missing_grads();
        assert!(store.adam_step(&AdamConfig::default()).is_ok());
    }

    #[test]
    fn reserved_names_are_rejected() {
        let mut store = ParamStore::new();
        assert!(store.create("!adam_m!x", Tensor::row(vec![0.0])).is_err());
    }

    #[test]
    fn identical_updates_are_bit_identical() {
        let run = || {
            let mut store = ParamStore::new();
            store.create("p", Tensor::row(vec![0.3, -0.7])).unwrap();
            for step in 0..5 {
                let g = [0.1 * step as f32, -0.05];
                store.accumulate_grad("p", &g).unwrap();
                store.adam_step(&AdamConfig::default()).unwrap();
            }
            store.get("p").unwrap().values.clone()
        };
        assert_eq!(run(), run());
    }
}
