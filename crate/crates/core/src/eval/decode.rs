use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bound, ModelParams};
use crate::numerics::{log_sum_exp, Tape, Var};
use crate::seq2seq::EncoderOutput;
use crate::text::{Language, BOS, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Maximum number of generated tokens, not counting `<eos>`.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            max_len: 30,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            max_len,
        }
    }

    pub fn beam(width: usize, max_len: usize) -> Self {
        DecodeConfig {
            strategy: Strategy::Beam(width),
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::Config("decode max_len must be at least 1".into()));
        }
        if self.strategy == Strategy::Beam(0) {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        Ok(())
    }
}

/// Decoder state for one query on a private tape.
struct Session<'a> {
    params: &'a ModelParams,
    lang: Language,
    tape: Tape,
    bound: Bound,
    enc: EncoderOutput,
    keys: Vec<Var>,
    h0: Var,
}

impl<'a> Session<'a> {
    fn new(params: &'a ModelParams, lang: Language, query: &[usize]) -> Result<Self> {
        if query.is_empty() {
            return Err(Error::Empty("query"));
        }
        let lp = params.lang(lang)?;
        let mut tape = Tape::new();
        let bound = params.store.bind_frozen(&mut tape);
        let q = params.encode_query(&mut tape, &bound, lang, &[query.to_vec()], &[vec![true; query.len()]])?;
        let keys = lp.decoder.attention.project_keys(&mut tape, &bound, &q.encoder)?;
        Ok(Session {
            params,
            lang,
            tape,
            bound,
            enc: q.encoder,
            keys,
            h0: q.c_star,
        })
    }

    /// Log-probabilities of the next token. `<pad>` and `<bos>` are never
    /// produced.
    fn step(&mut self, prev: usize, h: Var) -> Result<(Vec<f64>, Var)> {
        let dec = &self.params.lang(self.lang)?.decoder;
        let (logits, h) = dec.decode_step(&mut self.tape, &self.bound, &[prev], h, &self.enc, &self.keys)?;
        let mut row = self.tape.value(logits).data().to_vec();
        row[PAD] = f64::NEG_INFINITY;
        row[BOS] = f64::NEG_INFINITY;
        let lse = log_sum_exp(&row);
        row.iter_mut().for_each(|x| *x -= lse);
        Ok((row, h))
    }
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Generates a response (without `<bos>`/`<eos>`) for one query.
pub fn generate(params: &ModelParams, lang: Language, query: &[usize], cfg: &DecodeConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let mut s = Session::new(params, lang, query)?;
    match cfg.strategy {
        Strategy::Greedy => greedy(&mut s, cfg.max_len),
        Strategy::Beam(width) => beam(&mut s, width, cfg.max_len),
    }
}

fn greedy(s: &mut Session, max_len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let mut prev = BOS;
    let mut h = s.h0;
    while out.len() < max_len {
        let (logp, next_h) = s.step(prev, h)?;
        let tok = argmax(&logp);
        if tok == EOS {
            break;
        }
        out.push(tok);
        prev = tok;
        h = next_h;
    }
    Ok(out)
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
    h: Var,
    done: bool,
}

impl Hyp {
    /// Log-probability per scored token (`<eos>` counts when present).
    fn normalized(&self) -> f64 {
        let n = self.tokens.len() + usize::from(self.done);
        if n == 0 {
            0.0
        } else {
            self.logp / n as f64
        }
    }
}

/// Beam search ranked by length-normalized log-probability. Expansions are
/// ordered by cumulative score, then step score, then parent rank, then token
/// id, so a width of one follows the greedy path exactly.
fn beam(s: &mut Session, width: usize, max_len: usize) -> Result<Vec<usize>> {
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        logp: 0.0,
        h: s.h0,
        done: false,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    while !live.is_empty() && finished.len() < width {
        let mut cands: Vec<(f64, f64, usize, usize, Var)> = Vec::new();
        for (rank, hyp) in live.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let (logp, h) = s.step(prev, hyp.h)?;
            for (tok, &lp) in logp.iter().enumerate() {
                if lp.is_finite() {
                    cands.push((hyp.logp + lp, lp, rank, tok, h));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(b.1.total_cmp(&a.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        let mut next = Vec::new();
        for (score, _, rank, tok, h) in cands.into_iter().take(width) {
            let mut hyp = live[rank].clone();
            hyp.logp = score;
            hyp.h = h;
            if tok == EOS {
                hyp.done = true;
                finished.push(hyp);
            } else {
                hyp.tokens.push(tok);
                if hyp.tokens.len() >= max_len {
                    finished.push(hyp);
                } else {
                    next.push(hyp);
                }
            }
        }
        live = next;
    }
    finished.extend(live);
    let mut best = &finished[0];
    for h in &finished[1..] {
        if h.normalized() > best.normalized() {
            best = h;
        }
    }
    Ok(best.tokens.clone())
}
