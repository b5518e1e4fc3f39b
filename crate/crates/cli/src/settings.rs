use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use spmem::eval::{DecodeConfig, Strategy};
use spmem::text::synth::SharedRule;
use spmem::train::TrainConfig;

/// Corpus sizes and rule for `synth`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSettings {
    pub pairs: [usize; 2],
    pub valid: usize,
    pub test: usize,
    pub vocab: usize,
    pub rule: SharedRule,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            pairs: [1000, 1000],
            valid: 100,
            test: 100,
            vocab: 20,
            rule: SharedRule::ReverseParity,
        }
    }
}

/// Every configurable value of every command. The config file is one flat
/// `key = value` namespace; each command reads the parts it needs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Settings {
    pub train: TrainConfig,
    pub synth: SynthSettings,
    pub decode: DecodeConfig,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().ok().with_context(|| format!("invalid value `{v}` for `{key}`"))
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(p) = path {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            s.apply_text(&text).with_context(|| format!("in config {}", p.display()))?;
        }
        Ok(s)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("line {}: expected `key = value`", n + 1);
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "pairs" => {
                let n = num(key, v)?;
                self.synth.pairs = [n, n];
            }
            "pairs_l1" => self.synth.pairs[0] = num(key, v)?,
            "pairs_l2" => self.synth.pairs[1] = num(key, v)?,
            "valid_pairs" => self.synth.valid = num(key, v)?,
            "test_pairs" => self.synth.test = num(key, v)?,
            "synth_vocab" => self.synth.vocab = num(key, v)?,
            "rule" => self.synth.rule = v.parse()?,
            "beam" => {
                let w: usize = num(key, v)?;
                self.decode.strategy = if w <= 1 { Strategy::Greedy } else { Strategy::Beam(w) };
            }
            "decode_max_len" => self.decode.max_len = num(key, v)?,
            _ => self.train.set(key, v)?,
        }
        Ok(())
    }

    /// `--set key=value` overrides.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let Some((k, v)) = p.split_once('=') else {
                bail!("--set expects key=value, got `{p}`");
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Resolved values as a flat map, the form recorded in run manifests.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let mut m: BTreeMap<String, String> = self
            .train
            .to_text()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let s = &self.synth;
        m.insert("pairs_l1".into(), s.pairs[0].to_string());
        m.insert("pairs_l2".into(), s.pairs[1].to_string());
        m.insert("valid_pairs".into(), s.valid.to_string());
        m.insert("test_pairs".into(), s.test.to_string());
        m.insert("synth_vocab".into(), s.vocab.to_string());
        m.insert("rule".into(), s.rule.name().to_string());
        let beam = match self.decode.strategy {
            Strategy::Greedy => 1,
            Strategy::Beam(w) => w,
        };
        m.insert("beam".into(), beam.to_string());
        m.insert("decode_max_len".into(), self.decode.max_len.to_string());
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use spmem::model::ModelKind;

    #[test]
    fn file_then_overrides() {
        let mut s = Settings::default();
        s.apply_text("# comment\nmodel = spmem\npairs = 50\nbeam = 4\nhidden_dim = 16\n").unwrap();
        assert_eq!(s.train.model, ModelKind::SpMem);
        assert_eq!(s.synth.pairs, [50, 50]);
        assert_eq!(s.decode.strategy, Strategy::Beam(4));
        s.apply_overrides(&["hidden_dim=32".into(), "pairs_l2=7".into()]).unwrap();
        assert_eq!(s.train.hidden_dim, 32);
        assert_eq!(s.synth.pairs, [50, 7]);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(Settings::default().apply_text("bogus = 1").is_err());
        assert!(Settings::default().apply_text("no equals sign").is_err());
    }

    #[test]
    fn snapshot_roundtrips() {
        let mut s = Settings::default();
        s.apply_text("model = mem\nrule = copy\npairs_l1 = 3\nbeam = 2\nlr = 0.002").unwrap();
        let text: String = s.snapshot().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let mut back = Settings::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back, s);
    }
}
