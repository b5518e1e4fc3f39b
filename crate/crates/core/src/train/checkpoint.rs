//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SPMEMCKP"
//! version    u32
//! fingerprint 32 bytes  sha256 of the model architecture
//! count      u32      number of records
//! records    count x { kind u8, name_len u32, name, payload }
//!              kind 0 text:  len u64, utf-8 bytes
//!              kind 1 array: rank u32, dims u64 x rank, f64 x prod(dims)
//!              kind 2 u64:   value u64
//! checksum   32 bytes  sha256 of everything before it
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{AdamConfig, AdamState, Tensor};
use crate::text::{Language, Vocabulary};
use crate::train::config::TrainConfig;
use crate::train::trainer::{metrics_csv, parse_metrics_csv, EarlyStop, MetricRow};

pub const MAGIC: &[u8; 8] = b"SPMEMCKP";
pub const VERSION: u32 = 1;

/// Everything needed to evaluate a model or resume its training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<MetricRow>,
    pub vocabs: [Option<Vocabulary>; 2],
    pub early_stop: EarlyStop,
    /// Best parameters so far, in store order. Present in resumable checkpoints.
    pub best_params: Option<Vec<Tensor>>,
}

#[derive(Debug, Clone, PartialEq)]
enum Record {
    Text(String),
    Array(Tensor),
    U64(u64),
}

impl Checkpoint {
    pub fn fingerprint(&self) -> String {
        self.params.config.fingerprint()
    }

    pub fn vocab(&self, lang: Language) -> Result<&Vocabulary> {
        self.vocabs[lang.index()]
            .as_ref()
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    fn records(&self) -> Result<Vec<(String, Record)>> {
        let mut r = vec![
            ("train_config".to_string(), Record::Text(self.train_config.to_text())),
            ("model_config".to_string(), Record::Text(serde_json::to_string(&self.params.config)?)),
            ("epoch".to_string(), Record::U64(self.epoch as u64)),
            ("history".to_string(), Record::Text(metrics_csv(&self.history))),
            ("adam.config".to_string(), Record::Text(serde_json::to_string(&self.adam.config)?)),
            ("adam.step".to_string(), Record::U64(self.adam.step)),
            (
                "early_stop".to_string(),
                Record::Array(Tensor::vector(vec![
                    self.early_stop.best_score,
                    self.early_stop.best_epoch as f64,
                    self.early_stop.stale_epochs as f64,
                ])),
            ),
        ];
        for l in Language::ALL {
            if let Some(v) = &self.vocabs[l.index()] {
                r.push((format!("vocab.{l}"), Record::Text(v.to_text())));
            }
        }
        let store = &self.params.store;
        for (i, (_, name, t)) in store.iter().enumerate() {
            r.push((format!("param/{name}"), Record::Array(t.clone())));
            r.push((format!("adam.m/{name}"), Record::Array(Tensor::vector(self.adam.m[i].clone()))));
            r.push((format!("adam.v/{name}"), Record::Array(Tensor::vector(self.adam.v[i].clone()))));
            if let Some(best) = &self.best_params {
                r.push((format!("best/{name}"), Record::Array(best[i].clone())));
            }
        }
        Ok(r)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let records = self.records()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&hex_decode(&self.fingerprint())?);
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, rec) in &records {
            let kind: u8 = match rec {
                Record::Text(_) => 0,
                Record::Array(_) => 1,
                Record::U64(_) => 2,
            };
            out.push(kind);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match rec {
                Record::Text(s) => {
                    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
                Record::Array(t) => {
                    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for &x in t.data() {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Record::U64(v) => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parses a checkpoint. With `expected`, the stored architecture
    /// fingerprint must match that configuration's.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Checksum);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let found = hex_encode(r.take(32)?);
        if let Some(cfg) = expected {
            let want = cfg.fingerprint();
            if want != found {
                return Err(Error::Fingerprint { expected: want, found });
            }
        }
        let count = r.u32()? as usize;
        let mut recs: BTreeMap<String, Record> = BTreeMap::new();
        for _ in 0..count {
            let kind = r.take(1)?[0];
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("record name is not utf-8".into()))?;
            let rec = match kind {
                0 => {
                    let n = r.len_u64()?;
                    Record::Text(
                        String::from_utf8(r.take(n)?.to_vec())
                            .map_err(|_| Error::Format(format!("record `{name}` is not utf-8")))?,
                    )
                }
                1 => {
                    let rank = r.u32()? as usize;
                    let dims = (0..rank).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
                    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
                    let n = n.ok_or_else(|| Error::Format(format!("record `{name}` is too large")))?;
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Record::Array(Tensor::new(&dims, data)?)
                }
                2 => Record::U64(u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"))),
                k => return Err(Error::Format(format!("unknown record kind {k}"))),
            };
            if recs.insert(name.clone(), rec).is_some() {
                return Err(Error::Format(format!("duplicate record `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after records".into()));
        }
        let ckpt = Checkpoint::from_records(recs)?;
        if ckpt.fingerprint() != found {
            return Err(Error::Format("stored fingerprint does not match the stored model config".into()));
        }
        Ok(ckpt)
    }

    fn from_records(mut recs: BTreeMap<String, Record>) -> Result<Self> {
        let mut take = |name: &str| recs.remove(name).ok_or_else(|| Error::Format(format!("missing record `{name}`")));
        let text = |r: Record, name: &str| match r {
            Record::Text(s) => Ok(s),
            _ => Err(Error::Format(format!("record `{name}` should be text"))),
        };
        let int = |r: Record, name: &str| match r {
            Record::U64(v) => Ok(v),
            _ => Err(Error::Format(format!("record `{name}` should be an integer"))),
        };
        let array = |r: Record, name: &str| match r {
            Record::Array(t) => Ok(t),
            _ => Err(Error::Format(format!("record `{name}` should be an array"))),
        };

        let train_config = TrainConfig::from_text(&text(take("train_config")?, "train_config")?)?;
        let model_config: ModelConfig = serde_json::from_str(&text(take("model_config")?, "model_config")?)?;
        let epoch = int(take("epoch")?, "epoch")? as usize;
        let history = parse_metrics_csv(&text(take("history")?, "history")?)?;
        let adam_config: AdamConfig = serde_json::from_str(&text(take("adam.config")?, "adam.config")?)?;
        let adam_step = int(take("adam.step")?, "adam.step")?;
        let es = array(take("early_stop")?, "early_stop")?;
        if es.len() != 3 {
            return Err(Error::Format("early_stop record needs 3 values".into()));
        }
        let early_stop = EarlyStop {
            best_score: es.data()[0],
            best_epoch: es.data()[1] as usize,
            stale_epochs: es.data()[2] as usize,
        };
        let mut vocabs = [None, None];
        for l in Language::ALL {
            if let Ok(r) = take(&format!("vocab.{l}")) {
                vocabs[l.index()] = Some(Vocabulary::from_text(&text(r, "vocab")?)?);
            }
        }

        let mut params = ModelParams::new(model_config, 0)?;
        let n = params.store.len();
        let names: Vec<String> = params.store.names().to_vec();
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        let mut best = Vec::with_capacity(n);
        for (i, name) in names.iter().enumerate() {
            let p = array(take(&format!("param/{name}"))?, name)?;
            let slot = &mut params.store.tensors_mut()[i];
            if p.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    p.shape(),
                    slot.shape()
                )));
            }
            *slot = p;
            for (dst, prefix) in [(&mut m, "adam.m"), (&mut v, "adam.v")] {
                let t = array(take(&format!("{prefix}/{name}"))?, name)?;
                if t.len() != slot.len() {
                    return Err(Error::Format(format!("optimizer state for `{name}` has the wrong size")));
                }
                dst.push(t.into_data());
            }
            if let Ok(b) = take(&format!("best/{name}")) {
                let b = array(b, name)?;
                if b.shape() != slot.shape() {
                    return Err(Error::Format(format!("best copy of `{name}` has the wrong shape")));
                }
                best.push(b);
            }
        }
        let best_params = match best.len() {
            0 => None,
            k if k == n => Some(best),
            _ => return Err(Error::Format("best parameters are incomplete".into())),
        };
        if let Some(name) = recs.keys().next() {
            return Err(Error::Format(format!("unexpected record `{name}`")));
        }
        Ok(Checkpoint {
            train_config,
            params,
            adam: AdamState {
                config: adam_config,
                step: adam_step,
                m,
                v,
            },
            epoch,
            history,
            vocabs,
            early_stop,
            best_params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?, None)
    }

    /// Loads and checks the architecture against `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?, Some(expected))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format("length overflows usize".into()))
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Format("odd-length hex string".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| Error::Format("bad hex".into())))
        .collect()
}
