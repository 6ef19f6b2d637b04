use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerSite};
use crate::error::{Error, Result};

/// Tokens are raw bytes plus two specials.
pub const BYTE_VOCAB: usize = 258;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab: BYTE_VOCAB,
            max_seq: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab < BYTE_VOCAB {
            return Err(Error::Config(format!(
                "vocab {} cannot hold {BYTE_VOCAB} byte-level tokens",
                self.vocab
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Block whose post-residual output is the middle distillation site.
    pub fn middle_layer(&self) -> usize {
        self.n_layers / 2
    }

    /// `(out, in)` dimensions of a linear layer kind.
    pub fn dims(&self, kind: LayerKind) -> (usize, usize) {
        let (d, f) = (self.d_model, self.d_ff);
        match kind {
            LayerKind::Q | LayerKind::K | LayerKind::V | LayerKind::O => (d, d),
            LayerKind::Up => (f, d),
            LayerKind::Down => (d, f),
        }
    }

    /// Every factorizable linear layer in forward order.
    pub fn sites(&self) -> Vec<LayerSite> {
        (0..self.n_layers)
            .flat_map(|layer| LayerKind::ALL.iter().map(move |&kind| LayerSite { layer, kind }))
            .collect()
    }
}

/// Settings for next-token pre-training of the toy model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            seq_len: 64,
            lr: 3e-3,
            weight_decay: 0.01,
        }
    }
}

/// Contents of a `key = value` config file.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
}

impl ConfigFile {
    /// Blank lines and `#` comments are ignored; unknown or repeated keys are
    /// errors. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = ConfigFile::default();
        let mut seen = std::collections::BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", no + 1)));
            }
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("line {}: `{key}`: {e}", no + 1));
            let int = || value.parse::<usize>().map_err(|e| bad(&e));
            let float = || value.parse::<f64>().map_err(|e| bad(&e));
            let m = &mut out.model;
            let p = &mut out.pretrain;
            match key {
                "n_layers" => m.n_layers = int()?,
                "d_model" => m.d_model = int()?,
                "n_heads" => m.n_heads = int()?,
                "d_ff" => m.d_ff = int()?,
                "vocab" => m.vocab = int()?,
                "max_seq" => m.max_seq = int()?,
                "seed" => m.seed = value.parse::<u64>().map_err(|e| bad(&e))?,
                "steps" => p.steps = int()?,
                "batch_size" => p.batch_size = int()?,
                "seq_len" => p.seq_len = int()?,
                "lr" => p.lr = float()?,
                "weight_decay" => p.weight_decay = float()?,
                _ => return Err(Error::Config(format!("line {}: unknown key `{key}`", no + 1))),
            }
        }
        out.model.validate()?;
        if out.pretrain.batch_size == 0 || out.pretrain.seq_len == 0 {
            return Err(Error::Config("batch_size and seq_len must be at least 1".into()));
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_has_24_sites() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.sites().len(), 24);
        assert_eq!(c.middle_layer(), 2);
        assert_eq!(c.dims(LayerKind::Up), (128, 64));
        assert_eq!(c.dims(LayerKind::Down), (64, 128));
    }

    #[test]
    fn parse_overrides_and_comments() {
        let f = ConfigFile::parse("# toy\nn_layers = 2\n\nd_model=32 # small\nlr = 0.01\nseed = 7\n").unwrap();
        assert_eq!(f.model.n_layers, 2);
        assert_eq!(f.model.d_model, 32);
        assert_eq!(f.model.seed, 7);
        assert_eq!(f.pretrain.lr, 0.01);
        assert_eq!(f.model.d_ff, 128);
    }

    #[test]
    fn parse_rejects_unknown_duplicate_and_invalid() {
        assert!(matches!(ConfigFile::parse("depth = 3"), Err(Error::Config(_))));
        assert!(matches!(ConfigFile::parse("d_model = 4\nd_model = 8"), Err(Error::Config(_))));
        assert!(matches!(ConfigFile::parse("d_model = 10\nn_heads = 4"), Err(Error::Config(_))));
        assert!(matches!(ConfigFile::parse("d_model"), Err(Error::Config(_))));
        assert!(matches!(ConfigFile::parse("vocab = 100"), Err(Error::Config(_))));
    }
}
