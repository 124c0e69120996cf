//! Training configuration with flat key=value (de)serialization.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Which alignment levels contribute to the latent similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelToggles {
    pub individual: bool,
    pub local: bool,
    pub global: bool,
}

impl Default for LevelToggles {
    fn default() -> Self {
        LevelToggles { individual: true, local: true, global: true }
    }
}

/// All training hyperparameters. Defaults follow the published recipe:
/// Adam at 1e-4, batches of 64, margin 0.2, attention temperature 4,
/// loss weights 0.1 / 0.01, 10 reliable actions and 20 reliable entities,
/// vocabularies of 512 verbs and 1024 nouns, 50 epochs with patience 10.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub margin: f32,
    pub lambda: f32,
    pub eta: f32,
    pub mu: f32,
    pub n_a: usize,
    pub n_e: usize,
    pub k_a: usize,
    pub k_e: usize,
    pub latent_dim: usize,
    pub role_types: usize,
    pub seed: u64,
    pub levels: LevelToggles,
    pub stack_sum_normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 64,
            max_epochs: 50,
            patience: 10,
            margin: 0.2,
            lambda: 4.0,
            eta: 0.1,
            mu: 0.01,
            n_a: 10,
            n_e: 20,
            k_a: 512,
            k_e: 1024,
            latent_dim: 256,
            role_types: 16,
            seed: 7,
            levels: LevelToggles::default(),
            stack_sum_normalize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.margin <= 0.0 || self.lambda <= 0.0 {
            return Err(Error::invalid("lr, margin and lambda must be positive".to_string()));
        }
        if self.eta < 0.0 || self.mu < 0.0 {
            return Err(Error::invalid("eta and mu must be nonnegative".to_string()));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2 (ranking needs negatives)".to_string()));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::invalid("need 0 < patience <= max_epochs".to_string()));
        }
        if self.n_a == 0 || self.n_e == 0 || self.k_a == 0 || self.k_e == 0 {
            return Err(Error::invalid("n_a, n_e, k_a, k_e must be positive".to_string()));
        }
        if self.latent_dim < 2 || self.role_types < 2 {
            return Err(Error::invalid("latent_dim and role_types must be at least 2".to_string()));
        }
        if !self.levels.individual && !self.levels.local && !self.levels.global {
            return Err(Error::invalid("at least one alignment level must be enabled".to_string()));
        }
        Ok(())
    }

    /// Apply one `key=value` override; unknown keys are rejected.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::invalid(format!("config key {key:?}: cannot parse {value:?}")))
        }
        match key {
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "mu" => self.mu = parse(key, value)?,
            "n_a" => self.n_a = parse(key, value)?,
            "n_e" => self.n_e = parse(key, value)?,
            "k_a" => self.k_a = parse(key, value)?,
            "k_e" => self.k_e = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "role_types" => self.role_types = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "individual" => self.levels.individual = parse(key, value)?,
            "local" => self.levels.local = parse(key, value)?,
            "global" => self.levels.global = parse(key, value)?,
            "stack_sum_normalize" => self.stack_sum_normalize = parse(key, value)?,
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse a whole flat config file (one `key=value` per line, `#` comments).
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key=value", lineno + 1)))?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Flat key=value dump, one key per line in fixed order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "lr={}", self.lr);
        let _ = writeln!(out, "batch_size={}", self.batch_size);
        let _ = writeln!(out, "max_epochs={}", self.max_epochs);
        let _ = writeln!(out, "patience={}", self.patience);
        let _ = writeln!(out, "margin={}", self.margin);
        let _ = writeln!(out, "lambda={}", self.lambda);
        let _ = writeln!(out, "eta={}", self.eta);
        let _ = writeln!(out, "mu={}", self.mu);
        let _ = writeln!(out, "n_a={}", self.n_a);
        let _ = writeln!(out, "n_e={}", self.n_e);
        let _ = writeln!(out, "k_a={}", self.k_a);
        let _ = writeln!(out, "k_e={}", self.k_e);
        let _ = writeln!(out, "latent_dim={}", self.latent_dim);
        let _ = writeln!(out, "role_types={}", self.role_types);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "individual={}", self.levels.individual);
        let _ = writeln!(out, "local={}", self.levels.local);
        let _ = writeln!(out, "global={}", self.levels.global);
        let _ = writeln!(out, "stack_sum_normalize={}", self.stack_sum_normalize);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip_is_lossless() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 3e-3;
        cfg.levels.local = false;
        cfg.seed = 99;
        let text = cfg.to_kv();
        let mut parsed = TrainConfig::default();
        parsed.apply_file(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply_kv("learning_rate", "0.1").is_err());
    }

    #[test]
    fn disabling_every_level_fails_validation() {
        let mut cfg = TrainConfig::default();
        cfg.levels = LevelToggles { individual: false, local: false, global: false };
        assert!(cfg.validate().is_err());
    }
}
