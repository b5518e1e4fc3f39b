use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use crate::error::{Error, Result};

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-1 through BLEU-`max_n` (index `k-1` holds BLEU-k).
///
/// Modified n-gram precisions are pooled over the corpus. A zero precision at
/// order two or higher becomes `1 / (total + 1)`; a zero unigram precision
/// makes every score zero.
pub fn bleu<T: Hash + Eq>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<Vec<f64>> {
    if hyps.is_empty() {
        return Err(Error::Empty("bleu hypotheses"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::shape("bleu", &[hyps.len()], &[refs.len()]));
    }
    if max_n == 0 {
        return Err(Error::Config("bleu order must be at least 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(vec![0.0; max_n]);
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let mut log_p = Vec::with_capacity(max_n);
    for n in 0..max_n {
        let p = if matches[n] == 0 {
            1.0 / (totals[n] + 1) as f64
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_p.push(p.ln());
    }
    Ok((1..=max_n)
        .map(|k| (bp * (log_p[..k].iter().sum::<f64>() / k as f64).exp()).clamp(0.0, 1.0))
        .collect())
}

/// Distinct n-grams over all n-grams across the hypotheses.
pub fn distinct_n<T: Hash + Eq>(hyps: &[Vec<T>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("distinct-n needs n >= 1".into()));
    }
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for h in hyps {
        if h.len() >= n {
            for g in h.windows(n) {
                seen.insert(g);
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("distinct-n (no n-grams)"));
    }
    Ok(seen.len() as f64 / total as f64)
}
