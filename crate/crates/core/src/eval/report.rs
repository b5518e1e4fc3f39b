use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::decode::{generate, DecodeConfig};
use crate::eval::metrics::{bleu, distinct_n};
use crate::model::ModelParams;
use crate::text::{tokenize, ConversationPair, Language, Vocabulary};

/// One generated response next to its query and reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub query: String,
    pub hypothesis: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    /// Zero when the hypotheses contain no unigrams.
    pub distinct_1: f64,
    /// Zero when the hypotheses contain no bigrams.
    pub distinct_2: f64,
    pub examples: usize,
    /// Identifiers of the inputs (checkpoint, test corpus, language).
    pub corpora: BTreeMap<String, String>,
    pub generations: Vec<Generation>,
}

impl MetricReport {
    /// Scores whitespace-tokenized hypotheses against their references.
    pub fn from_generations(generations: Vec<Generation>, corpora: BTreeMap<String, String>) -> Result<Self> {
        let hyps: Vec<Vec<String>> = generations.iter().map(|g| tokenize(&g.hypothesis)).collect();
        let refs: Vec<Vec<String>> = generations.iter().map(|g| tokenize(&g.reference)).collect();
        let b = bleu(&hyps, &refs, 4)?;
        let distinct = |n| match distinct_n(&hyps, n) {
            Err(Error::Empty(_)) => Ok(0.0),
            other => other,
        };
        Ok(MetricReport {
            bleu_1: b[0],
            bleu_2: b[1],
            bleu_3: b[2],
            bleu_4: b[3],
            distinct_1: distinct(1)?,
            distinct_2: distinct(2)?,
            examples: generations.len(),
            corpora,
            generations,
        })
    }

    pub fn scores(&self) -> [f64; 6] {
        [self.bleu_1, self.bleu_2, self.bleu_3, self.bleu_4, self.distinct_1, self.distinct_2]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Generates a response for every pair's query.
pub fn generate_all(
    params: &ModelParams,
    vocab: &Vocabulary,
    lang: Language,
    pairs: &[ConversationPair],
    cfg: &DecodeConfig,
) -> Result<Vec<Generation>> {
    pairs
        .iter()
        .map(|p| {
            let ids = vocab.encode(&p.query);
            let out = generate(params, lang, &ids, cfg)?;
            Ok(Generation {
                query: p.query_text(),
                hypothesis: vocab.decode(&out).join(" "),
                reference: p.response_text(),
            })
        })
        .collect()
}

pub fn generations_tsv(gens: &[Generation]) -> String {
    let mut s = String::new();
    for g in gens {
        s.push_str(&format!("{}\t{}\t{}\n", g.query, g.hypothesis, g.reference));
    }
    s
}

pub fn parse_generations_tsv(text: &str, origin: &Path) -> Result<Vec<Generation>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Corpus {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected 3 tab-separated fields, found {}", f.len()),
                });
            }
            Ok(Generation {
                query: f[0].to_string(),
                hypothesis: f[1].to_string(),
                reference: f[2].to_string(),
            })
        })
        .collect()
}

pub fn load_generations(path: &Path) -> Result<Vec<Generation>> {
    parse_generations_tsv(&fs::read_to_string(path)?, path)
}
