//! The five model variants and their parameters.
//!
//! | kind       | memory between encoder and decoder           |
//! |------------|----------------------------------------------|
//! | `seq2seq`  | none, the decoder starts from `c`            |
//! | `mem`      | one private single-block bank                |
//! | `impmem`   | one private blocked bank                     |
//! | `spmem`    | private + shared single-block banks          |
//! | `spimpmem` | private + shared blocked banks               |

pub mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::memory::{shared_private_forward, Combiner, MemoryBank, MemoryReadout, SharedPrivateMemory};
use crate::numerics::{Tape, Var};
use crate::seq2seq::{encode, sequence_nll, Decoder, Embedding, EncoderOutput, GruParams};
use crate::text::{Batch, Language};

pub use params::{Bound, Init, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    Seq2Seq,
    Mem,
    ImpMem,
    SpMem,
    SpImpMem,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Seq2Seq,
        ModelKind::Mem,
        ModelKind::ImpMem,
        ModelKind::SpMem,
        ModelKind::SpImpMem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Seq2Seq => "seq2seq",
            ModelKind::Mem => "mem",
            ModelKind::ImpMem => "impmem",
            ModelKind::SpMem => "spmem",
            ModelKind::SpImpMem => "spimpmem",
        }
    }

    pub fn has_memory(self) -> bool {
        self != ModelKind::Seq2Seq
    }

    pub fn has_shared(self) -> bool {
        matches!(self, ModelKind::SpMem | ModelKind::SpImpMem)
    }

    /// Single-block variants ignore the configured block count.
    pub fn effective_blocks(self, configured: usize) -> usize {
        match self {
            ModelKind::Mem | ModelKind::SpMem => 1,
            _ => configured,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown model `{s}` (expected seq2seq, mem, impmem, spmem or spimpmem)")))
    }
}

/// Architecture of a model; everything that determines parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    /// Total memory slots per bank, divided evenly among its blocks.
    pub mem_slots: usize,
    pub mem_blocks: usize,
    /// Vocabulary size of each language present in the model.
    pub vocab_sizes: [Option<usize>; 2],
}

impl ModelConfig {
    pub fn blocks(&self) -> usize {
        self.kind.effective_blocks(self.mem_blocks)
    }

    pub fn languages(&self) -> Vec<Language> {
        Language::ALL
            .into_iter()
            .filter(|l| self.vocab_sizes[l.index()].is_some())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.emb_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("embedding and hidden sizes must be positive".into()));
        }
        if self.languages().is_empty() {
            return Err(Error::Config("model needs at least one language".into()));
        }
        if self.vocab_sizes.iter().flatten().any(|&v| v < 5) {
            return Err(Error::Config("vocabularies must hold at least one token beyond the reserved ids".into()));
        }
        if self.kind.has_memory() {
            let n = self.blocks();
            if n == 0 || self.hidden_dim % n != 0 {
                return Err(Error::Config(format!(
                    "memory blocks ({n}) must evenly divide the hidden size ({})",
                    self.hidden_dim
                )));
            }
            if self.mem_slots == 0 || self.mem_slots % n != 0 {
                return Err(Error::Config(format!(
                    "memory slots ({}) must be a positive multiple of the block count ({n})",
                    self.mem_slots
                )));
            }
        }
        Ok(())
    }

    /// Content hash of the architecture, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut canon = format!(
            "kind={};emb={};hidden={}",
            self.kind.name(),
            self.emb_dim,
            self.hidden_dim
        );
        if self.kind.has_memory() {
            canon.push_str(&format!(";slots={};blocks={}", self.mem_slots, self.blocks()));
        }
        for l in Language::ALL {
            if let Some(v) = self.vocab_sizes[l.index()] {
                canon.push_str(&format!(";vocab.{l}={v}"));
            }
        }
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-language encoder, decoder and memory view.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageParams {
    pub language: Language,
    pub embedding: Embedding,
    pub encoder: GruParams,
    pub decoder: Decoder,
    pub memory: Option<SharedPrivateMemory>,
}

/// All learnable parameters of one model. The shared bank's ids appear in
/// every language's memory view and point at one set of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    langs: [Option<LanguageParams>; 2],
    shared: Option<MemoryBank>,
}

/// Forward results for a batch of queries up to the decoder's initial state.
#[derive(Debug, Clone)]
pub struct QueryEncoding {
    pub encoder: EncoderOutput,
    pub c_star: Var,
    pub memory: Option<MemoryReadout>,
}

impl ModelParams {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (e, d) = (config.emb_dim, config.hidden_dim);
        let blocks = config.blocks();
        let shared = if config.kind.has_shared() {
            Some(MemoryBank::register(&mut store, "shared", d, config.mem_slots, blocks, seed)?)
        } else {
            None
        };
        let mut langs = [None, None];
        for lang in config.languages() {
            let vocab = config.vocab_sizes[lang.index()].expect("language present");
            let p = lang.as_str();
            let embedding = Embedding::register(&mut store, &format!("{p}.embedding"), vocab, e, seed)?;
            let encoder = GruParams::register(&mut store, &format!("{p}.encoder"), e, d, seed)?;
            let decoder = Decoder::register(&mut store, p, embedding, d, seed)?;
            let memory = if config.kind.has_memory() {
                let private = MemoryBank::register(&mut store, &format!("{p}.private"), d, config.mem_slots, blocks, seed)?;
                let shared = match &shared {
                    Some(bank) => Some((bank.clone(), Combiner::register(&mut store, &format!("{p}.combiner"), d, seed)?)),
                    None => None,
                };
                Some(SharedPrivateMemory { private, shared })
            } else {
                None
            };
            langs[lang.index()] = Some(LanguageParams {
                language: lang,
                embedding,
                encoder,
                decoder,
                memory,
            });
        }
        Ok(ModelParams {
            config,
            store,
            langs,
            shared,
        })
    }

    pub fn languages(&self) -> Vec<Language> {
        self.config.languages()
    }

    pub fn lang(&self, lang: Language) -> Result<&LanguageParams> {
        self.langs[lang.index()]
            .as_ref()
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    pub fn shared_bank(&self) -> Option<&MemoryBank> {
        self.shared.as_ref()
    }

    /// Detaches every language from the shared bank so `c*` is the private
    /// read-out alone. The shared tensors stay in the store but receive no
    /// gradient.
    pub fn disable_shared(&mut self) {
        for lp in self.langs.iter_mut().flatten() {
            if let Some(mem) = lp.memory.as_mut() {
                mem.shared = None;
            }
        }
    }

    /// Inspectable banks, named `private-L1`, `private-L2` and `shared`.
    pub fn banks(&self) -> Vec<(String, &MemoryBank)> {
        let mut out = Vec::new();
        for lp in self.langs.iter().flatten() {
            if let Some(mem) = &lp.memory {
                out.push((format!("private-{}", lp.language), &mem.private));
            }
        }
        if let Some(s) = &self.shared {
            out.push(("shared".to_string(), s));
        }
        out
    }

    pub fn bank(&self, name: &str) -> Result<&MemoryBank> {
        self.banks()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::MissingBank(name.to_string()))
    }

    /// Encoder plus memory read; `c_star` is the decoder's initial state.
    pub fn encode_query(
        &self,
        tape: &mut Tape,
        b: &Bound,
        lang: Language,
        ids: &[Vec<usize>],
        mask: &[Vec<bool>],
    ) -> Result<QueryEncoding> {
        let lp = self.lang(lang)?;
        let encoder = encode(tape, b, &lp.embedding, &lp.encoder, ids, mask)?;
        let (c_star, memory) = match &lp.memory {
            Some(mem) => {
                let r = shared_private_forward(tape, b, mem, encoder.context)?;
                (r.c_star, Some(r))
            }
            None => (encoder.context, None),
        };
        Ok(QueryEncoding { encoder, c_star, memory })
    }

    /// Teacher-forced mean token NLL of a monolingual batch; the batch's
    /// language tag selects the encoder, decoder and private memory.
    pub fn batch_loss(&self, tape: &mut Tape, b: &Bound, batch: &Batch) -> Result<Var> {
        let lp = self.lang(batch.language)?;
        let q = self.encode_query(tape, b, batch.language, &batch.query, &batch.query_mask)?;
        let steps = batch.response_len() - 1;
        let inputs: Vec<Vec<usize>> = batch.response.iter().map(|r| r[..steps].to_vec()).collect();
        let logits = lp.decoder.unroll(tape, b, q.c_star, &q.encoder, &inputs)?;
        let mut targets = Vec::with_capacity(steps * batch.len());
        let mut mask = Vec::with_capacity(steps * batch.len());
        for t in 1..=steps {
            for (row, m) in batch.response.iter().zip(&batch.response_mask) {
                targets.push(row[t]);
                mask.push(m[t]);
            }
        }
        sequence_nll(tape, logits, &targets, &mask)
    }

    /// [`ModelParams::batch_loss`] evaluated on a throwaway tape.
    pub fn joint_loss(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.store.bind_frozen(&mut tape);
        let loss = self.batch_loss(&mut tape, &b, batch)?;
        Ok(tape.value(loss).item())
    }
}
