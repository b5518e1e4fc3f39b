//! Synthetic bilingual dialogue data.
//!
//! Both languages answer queries with the same rule; the second language is a
//! fixed bijective renaming of the first language's surface tokens.

use std::collections::{BTreeMap, HashSet};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::corpus::{ConversationPair, Language};

pub const EVEN_TOKEN: &str = "EVEN";
pub const ODD_TOKEN: &str = "ODD";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SharedRule {
    /// Reverse the query, then append a token for the parity of its length.
    #[default]
    ReverseParity,
    /// Echo the query.
    Copy,
}

impl FromStr for SharedRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reverse" | "reverse-parity" => Ok(SharedRule::ReverseParity),
            "copy" => Ok(SharedRule::Copy),
            _ => Err(Error::Config(format!("unknown synthetic rule `{s}` (expected reverse or copy)"))),
        }
    }
}

impl SharedRule {
    pub fn name(self) -> &'static str {
        match self {
            SharedRule::ReverseParity => "reverse",
            SharedRule::Copy => "copy",
        }
    }

    /// The response for `query` in the first language's surface forms.
    pub fn respond(self, query: &[String]) -> Vec<String> {
        match self {
            SharedRule::Copy => query.to_vec(),
            SharedRule::ReverseParity => {
                let mut r: Vec<String> = query.iter().rev().cloned().collect();
                let parity = if query.len() % 2 == 0 { EVEN_TOKEN } else { ODD_TOKEN };
                r.push(parity.to_string());
                r
            }
        }
    }
}

/// Shape of the generated queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    /// Surface vocabulary per language, including the two parity tokens.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub rule: SharedRule,
}

impl SynthSpec {
    pub fn new(seed: u64, vocab_size: usize, rule: SharedRule) -> Self {
        SynthSpec {
            seed,
            vocab_size,
            min_len: 2,
            max_len: 6,
            rule,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::Config(format!("synthetic vocab_size must be >= 8, got {}", self.vocab_size)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("invalid query length range {}..={}", self.min_len, self.max_len)));
        }
        Ok(())
    }

    fn content_size(&self) -> usize {
        self.vocab_size - 2
    }

    /// Number of distinct queries the spec can produce.
    fn capacity(&self) -> f64 {
        (self.min_len..=self.max_len)
            .map(|l| (self.content_size() as f64).powi(l as i32))
            .sum()
    }

    pub fn l1_vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.content_size()).map(|i| format!("w{i}")).collect();
        v.push(EVEN_TOKEN.to_string());
        v.push(ODD_TOKEN.to_string());
        v
    }

    /// L1 surface token → L2 surface token.
    pub fn renaming(&self) -> BTreeMap<String, String> {
        let l1 = self.l1_vocabulary();
        let mut targets: Vec<usize> = (0..l1.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_4a3e_11a2_0b1d);
        targets.shuffle(&mut rng);
        l1.into_iter().zip(targets).map(|(t, j)| (t, format!("u{j}"))).collect()
    }

    /// `n` distinct L1 queries in generation order.
    pub fn queries(&self, n: usize) -> Result<Vec<Vec<String>>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::Config("pairs_per_language must be at least 1".into()));
        }
        if (n as f64) > 0.5 * self.capacity() {
            return Err(Error::Config(format!(
                "cannot draw {n} distinct queries from vocabulary {} with lengths {}..={}",
                self.vocab_size, self.min_len, self.max_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut seen = HashSet::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let len = rng.gen_range(self.min_len..=self.max_len);
            let q: Vec<String> = (0..len)
                .map(|_| format!("w{}", rng.gen_range(0..self.content_size())))
                .collect();
            if seen.insert(q.clone()) {
                out.push(q);
            }
        }
        Ok(out)
    }
}

pub fn rename(pair: &ConversationPair, map: &BTreeMap<String, String>, language: Language) -> ConversationPair {
    let tr = |toks: &[String]| toks.iter().map(|t| map.get(t).cloned().unwrap_or_else(|| t.clone())).collect();
    ConversationPair {
        query: tr(&pair.query),
        response: tr(&pair.response),
        language,
    }
}

pub fn invert(map: &BTreeMap<String, String>) -> BTreeMap<String, String> {
    map.iter().map(|(k, v)| (v.clone(), k.clone())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub l1: Vec<ConversationPair>,
    pub l2: Vec<ConversationPair>,
    /// L1 token → L2 token.
    pub renaming: BTreeMap<String, String>,
}

pub fn make_pairs(spec: &SynthSpec, queries: &[Vec<String>]) -> (Vec<ConversationPair>, Vec<ConversationPair>) {
    let map = spec.renaming();
    let l1: Vec<ConversationPair> = queries
        .iter()
        .map(|q| ConversationPair {
            query: q.clone(),
            response: spec.rule.respond(q),
            language: Language::L1,
        })
        .collect();
    let l2 = l1.iter().map(|p| rename(p, &map, Language::L2)).collect();
    (l1, l2)
}

/// Generates `pairs_per_language` distinct query/response pairs per language.
pub fn gen_synthetic_bilingual(
    seed: u64,
    pairs_per_language: usize,
    vocab_size: usize,
    rule: SharedRule,
) -> Result<SyntheticCorpus> {
    let spec = SynthSpec::new(seed, vocab_size, rule);
    let queries = spec.queries(pairs_per_language)?;
    let (l1, l2) = make_pairs(&spec, &queries);
    Ok(SyntheticCorpus {
        l1,
        l2,
        renaming: spec.renaming(),
    })
}

/// Train/valid/test splits for both languages with disjoint queries.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplits {
    pub train: [Vec<ConversationPair>; 2],
    pub valid: [Vec<ConversationPair>; 2],
    pub test: [Vec<ConversationPair>; 2],
}

/// Draws one pool of distinct queries and cuts it into test, valid and train
/// segments (in that order). Each language's train set is a prefix of the
/// train segment, so unbalanced sizes are supported.
pub fn gen_splits(spec: &SynthSpec, train: [usize; 2], valid: usize, test: usize) -> Result<SyntheticSplits> {
    let n_train = train[0].max(train[1]);
    let queries = spec.queries(n_train + valid + test)?;
    let (l1, l2) = make_pairs(spec, &queries);
    let cut = |v: &[ConversationPair], lang: usize| {
        (
            v[valid + test..valid + test + train[lang]].to_vec(),
            v[test..test + valid].to_vec(),
            v[..test].to_vec(),
        )
    };
    let (tr1, va1, te1) = cut(&l1, 0);
    let (tr2, va2, te2) = cut(&l2, 1);
    Ok(SyntheticSplits {
        train: [tr1, tr2],
        valid: [va1, va2],
        test: [te1, te2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn reverse_rule_by_hand() {
        assert_eq!(SharedRule::ReverseParity.respond(&toks("a b c")), toks("c b a ODD"));
        assert_eq!(SharedRule::ReverseParity.respond(&toks("a b")), toks("b a EVEN"));
        assert_eq!(SharedRule::Copy.respond(&toks("a b")), toks("a b"));
    }

    #[test]
    fn deterministic() {
        let a = gen_synthetic_bilingual(3, 50, 12, SharedRule::ReverseParity).unwrap();
        let b = gen_synthetic_bilingual(3, 50, 12, SharedRule::ReverseParity).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic_bilingual(4, 50, 12, SharedRule::ReverseParity).unwrap();
        assert_ne!(a.l1, c.l1);
    }

    #[test]
    fn renaming_is_a_disjoint_bijection() {
        let corpus = gen_synthetic_bilingual(9, 40, 10, SharedRule::ReverseParity).unwrap();
        let back = invert(&corpus.renaming);
        assert_eq!(back.len(), corpus.renaming.len());
        let restored: Vec<_> = corpus.l2.iter().map(|p| rename(p, &back, Language::L1)).collect();
        assert_eq!(restored, corpus.l1);
        let l1_tokens: HashSet<&String> = corpus.l1.iter().flat_map(|p| p.query.iter().chain(&p.response)).collect();
        assert!(corpus.l2.iter().flat_map(|p| p.query.iter()).all(|t| !l1_tokens.contains(t)));
    }

    #[test]
    fn invalid_sizes() {
        assert!(gen_synthetic_bilingual(1, 10, 7, SharedRule::Copy).is_err());
        assert!(gen_synthetic_bilingual(1, 0, 10, SharedRule::Copy).is_err());
        assert!(gen_synthetic_bilingual(1, 1_000_000, 8, SharedRule::Copy).is_err());
    }

    #[test]
    fn splits_are_disjoint() {
        let spec = SynthSpec::new(5, 12, SharedRule::ReverseParity);
        let s = gen_splits(&spec, [20, 100], 15, 15).unwrap();
        assert_eq!(s.train[0].len(), 20);
        assert_eq!(s.train[1].len(), 100);
        for lang in 0..2 {
            let train: HashSet<_> = s.train[lang].iter().map(|p| p.query.clone()).collect();
            assert!(s.test[lang].iter().all(|p| !train.contains(&p.query)));
            assert!(s.valid[lang].iter().all(|p| !train.contains(&p.query)));
        }
    }
}
