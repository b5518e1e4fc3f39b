use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind};
use crate::numerics::AdamConfig;
use crate::text::Language;

/// Everything a training run needs. Serialized as flat `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub mem_slots: usize,
    pub mem_blocks: usize,
    pub vocab_size: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub max_len: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub patience: usize,
    /// Cycle the smaller corpus so both languages get the same batch count.
    pub rebalance: bool,
    /// Train on one language only.
    pub monolingual: Option<Language>,
    pub train: [Option<PathBuf>; 2],
    pub valid: [Option<PathBuf>; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::SpImpMem,
            emb_dim: 32,
            hidden_dim: 64,
            mem_slots: 64,
            mem_blocks: 4,
            vocab_size: 60_000,
            batch_size: 32,
            max_epochs: 500,
            max_len: 30,
            lr: 1e-3,
            clip_norm: 5.0,
            seed: 1,
            patience: 5,
            rebalance: false,
            monolingual: None,
            train: [None, None],
            valid: [None, None],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    /// Full-size settings: 630-d embeddings, 1024-d states, 60k vocabularies,
    /// 1024 memory cells in 32 blocks, batches of 32.
    pub fn full_scale() -> Self {
        TrainConfig {
            emb_dim: 630,
            hidden_dim: 1024,
            mem_slots: 1024,
            mem_blocks: 32,
            vocab_size: 60_000,
            batch_size: 32,
            ..TrainConfig::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "model" => self.model = v.parse()?,
            "emb_dim" => self.emb_dim = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "mem_slots" => self.mem_slots = parse(key, v)?,
            "mem_blocks" | "blocks" => self.mem_blocks = parse(key, v)?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "rebalance" => self.rebalance = parse_bool(key, v)?,
            "monolingual" => {
                self.monolingual = match v {
                    "" | "none" => None,
                    l => Some(l.parse()?),
                }
            }
            "train_l1" => self.train[0] = path_or_none(v),
            "train_l2" => self.train[1] = path_or_none(v),
            "valid_l1" => self.valid[0] = path_or_none(v),
            "valid_l2" => self.valid[1] = path_or_none(v),
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values. `#` starts a
    /// comment; blank lines are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let _ = writeln!(s, "model = {}", self.model);
        let _ = writeln!(s, "emb_dim = {}", self.emb_dim);
        let _ = writeln!(s, "hidden_dim = {}", self.hidden_dim);
        let _ = writeln!(s, "mem_slots = {}", self.mem_slots);
        let _ = writeln!(s, "mem_blocks = {}", self.mem_blocks);
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "max_len = {}", self.max_len);
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "clip_norm = {:?}", self.clip_norm);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "rebalance = {}", self.rebalance);
        let _ = writeln!(s, "monolingual = {}", self.monolingual.map_or("none", Language::as_str));
        let _ = writeln!(s, "train_l1 = {}", path(&self.train[0]));
        let _ = writeln!(s, "train_l2 = {}", path(&self.train[1]));
        let _ = writeln!(s, "valid_l1 = {}", path(&self.valid[0]));
        let _ = writeln!(s, "valid_l2 = {}", path(&self.valid[1]));
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("emb_dim", self.emb_dim),
            ("hidden_dim", self.hidden_dim),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if self.max_len < 2 {
            return Err(Error::Config("`max_len` must be at least 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("`lr` and `clip_norm` must be positive".into()));
        }
        if self.model.has_memory() {
            let n = self.model.effective_blocks(self.mem_blocks);
            if n == 0 || self.hidden_dim % n != 0 || self.mem_slots == 0 || self.mem_slots % n != 0 {
                return Err(Error::Config(format!(
                    "memory blocks ({n}) must divide both hidden_dim ({}) and mem_slots ({})",
                    self.hidden_dim, self.mem_slots
                )));
            }
        }
        Ok(())
    }

    /// Languages the run trains on.
    pub fn languages(&self) -> Vec<Language> {
        match self.monolingual {
            Some(l) => vec![l],
            None => Language::ALL
                .into_iter()
                .filter(|l| self.train[l.index()].is_some())
                .collect(),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn model_config(&self, vocab_sizes: [Option<usize>; 2]) -> ModelConfig {
        ModelConfig {
            kind: self.model,
            emb_dim: self.emb_dim,
            hidden_dim: self.hidden_dim,
            mem_slots: self.mem_slots,
            mem_blocks: self.mem_blocks,
            vocab_sizes,
        }
    }
}

fn path_or_none(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_and_overrides() {
        let mut c = TrainConfig::default();
        c.apply_text("# desk run\nmodel = impmem\nlr = 0.005\nmonolingual = L2\ntrain_l2 = data/l2.tsv\n")
            .unwrap();
        assert_eq!(c.model, ModelKind::ImpMem);
        assert_eq!(c.monolingual, Some(Language::L2));
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(c.languages(), vec![Language::L2]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::from_text("nonsense = 3").is_err());
        assert!(TrainConfig::from_text("emb_dim = -1").is_err());
        assert!(TrainConfig::from_text("no equals sign").is_err());
        let c = TrainConfig::from_text("hidden_dim = 10\nmem_blocks = 4").unwrap();
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        let p = TrainConfig::full_scale();
        assert!(p.validate().is_ok());
        assert_eq!(p.hidden_dim / p.mem_blocks, 32);
    }
}
