use crate::error::{Error, Result};
use crate::text::corpus::{ConversationPair, Language};
use crate::text::vocab::{Vocabulary, BOS, EOS, PAD};

/// A conversation pair mapped to vocabulary ids (no BOS/EOS yet).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedPair {
    pub query: Vec<usize>,
    pub response: Vec<usize>,
    pub language: Language,
}

impl EncodedPair {
    pub fn new(pair: &ConversationPair, vocab: &Vocabulary) -> Self {
        EncodedPair {
            query: vocab.encode(&pair.query),
            response: vocab.encode(&pair.response),
            language: pair.language,
        }
    }
}

pub fn encode_all(pairs: &[ConversationPair], vocab: &Vocabulary) -> Vec<EncodedPair> {
    pairs.iter().map(|p| EncodedPair::new(p, vocab)).collect()
}

/// Padded id matrices for one monolingual mini-batch.
///
/// Response rows are `BOS y₁ … yₙ EOS` followed by padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub language: Language,
    pub query: Vec<Vec<usize>>,
    pub query_mask: Vec<Vec<bool>>,
    pub response: Vec<Vec<usize>>,
    pub response_mask: Vec<Vec<bool>>,
}

fn pad_rows(rows: Vec<Vec<usize>>) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let masks = rows
        .iter()
        .map(|r| (0..width).map(|i| i < r.len()).collect())
        .collect();
    let padded = rows
        .into_iter()
        .map(|mut r| {
            r.resize(width, PAD);
            r
        })
        .collect();
    (padded, masks)
}

impl Batch {
    /// Builds a batch from pairs of one language; query and response content
    /// are each truncated to `max_len` tokens.
    pub fn from_pairs(pairs: &[EncodedPair], max_len: usize) -> Result<Self> {
        let first = pairs.first().ok_or(Error::Empty("batch"))?;
        if let Some(p) = pairs.iter().find(|p| p.language != first.language) {
            return Err(Error::Config(format!(
                "mixed-language batch ({} and {})",
                first.language, p.language
            )));
        }
        let queries = pairs
            .iter()
            .map(|p| p.query.iter().copied().take(max_len).collect())
            .collect();
        let responses = pairs
            .iter()
            .map(|p| {
                let mut r = Vec::with_capacity(p.response.len().min(max_len) + 2);
                r.push(BOS);
                r.extend(p.response.iter().copied().take(max_len));
                r.push(EOS);
                r
            })
            .collect();
        let (query, query_mask) = pad_rows(queries);
        let (response, response_mask) = pad_rows(responses);
        Ok(Batch {
            language: first.language,
            query,
            query_mask,
            response,
            response_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query.is_empty()
    }

    pub fn query_len(&self) -> usize {
        self.query.first().map_or(0, Vec::len)
    }

    pub fn response_len(&self) -> usize {
        self.response.first().map_or(0, Vec::len)
    }

    /// Number of predicted target tokens (response tokens after BOS).
    pub fn target_tokens(&self) -> usize {
        self.response_mask
            .iter()
            .map(|m| m.iter().skip(1).filter(|&&b| b).count())
            .sum()
    }

    /// Unpadded content of row `i` as an [`EncodedPair`].
    pub fn row(&self, i: usize) -> EncodedPair {
        let q = self.query[i].iter().zip(&self.query_mask[i]).filter(|(_, &m)| m).map(|(&id, _)| id).collect();
        let r: Vec<usize> = self.response[i]
            .iter()
            .zip(&self.response_mask[i])
            .filter(|(_, &m)| m)
            .map(|(&id, _)| id)
            .collect();
        EncodedPair {
            query: q,
            response: r[1..r.len() - 1].to_vec(),
            language: self.language,
        }
    }
}

/// Chunks `pairs` in order into batches of `batch_size`; the final short
/// batch is kept.
pub fn make_batches(pairs: &[EncodedPair], batch_size: usize, max_len: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if max_len < 2 {
        return Err(Error::Config(format!("max_len must be at least 2, got {max_len}")));
    }
    pairs.chunks(batch_size).map(|c| Batch::from_pairs(c, max_len)).collect()
}

/// Alternates items of the two streams, starting with the first, until one is
/// exhausted; the remainder of the other follows in order.
pub fn interleave<T>(first: Vec<T>, second: Vec<T>) -> Result<Vec<T>> {
    if first.is_empty() && second.is_empty() {
        return Err(Error::Empty("interleave"));
    }
    let mut out = Vec::with_capacity(first.len() + second.len());
    let mut a = first.into_iter();
    let mut b = second.into_iter();
    loop {
        match (a.next(), b.next()) {
            (Some(x), Some(y)) => {
                out.push(x);
                out.push(y);
            }
            (Some(x), None) => {
                out.push(x);
                out.extend(a);
                break;
            }
            (None, Some(y)) => {
                out.push(y);
                out.extend(b);
                break;
            }
            (None, None) => break,
        }
    }
    Ok(out)
}

/// Like [`interleave`], but the shorter non-empty stream is cycled so both
/// contribute the same number of items.
pub fn interleave_rebalanced<T: Clone>(first: Vec<T>, second: Vec<T>) -> Result<Vec<T>> {
    if first.is_empty() || second.is_empty() {
        return interleave(first, second);
    }
    let n = first.len().max(second.len());
    let cycle = |v: Vec<T>| -> Vec<T> { v.iter().cycle().take(n).cloned().collect() };
    interleave(cycle(first), cycle(second))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn enc(q: &[usize], r: &[usize]) -> EncodedPair {
        EncodedPair {
            query: q.to_vec(),
            response: r.to_vec(),
            language: Language::L1,
        }
    }

    #[test]
    fn batch_sizes_and_final_short_batch() {
        let pairs: Vec<_> = (0..65).map(|i| enc(&[4 + i % 3], &[5])).collect();
        let sizes: Vec<_> = make_batches(&pairs, 32, 30).unwrap().iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![32, 32, 1]);
    }

    #[test]
    fn masks_and_eos_placement() {
        let pairs = vec![enc(&[4, 5, 6], &[7]), enc(&[8], &[9, 10, 11])];
        let b = Batch::from_pairs(&pairs, 30).unwrap();
        assert_eq!(b.query, vec![vec![4, 5, 6], vec![8, PAD, PAD]]);
        assert_eq!(b.response[0], vec![BOS, 7, EOS, PAD, PAD]);
        assert_eq!(b.response[1], vec![BOS, 9, 10, 11, EOS]);
        let q_tokens: usize = b.query_mask.iter().flatten().filter(|&&m| m).count();
        assert_eq!(q_tokens, 4);
        for (row, mask) in b.response.iter().zip(&b.response_mask) {
            let last = mask.iter().rposition(|&m| m).unwrap();
            assert_eq!(row[last], EOS);
            assert!(row.iter().zip(mask).all(|(&id, &m)| m == (id != PAD)));
        }
        assert_eq!(b.target_tokens(), 2 + 4);
    }

    #[test]
    fn truncation() {
        let b = Batch::from_pairs(&[enc(&[4, 5, 6, 7], &[8, 9, 10])], 2).unwrap();
        assert_eq!(b.query[0], vec![4, 5]);
        assert_eq!(b.response[0], vec![BOS, 8, 9, EOS]);
        assert!(make_batches(&[enc(&[4], &[5])], 4, 1).is_err());
    }

    #[test]
    fn mixed_language_rejected() {
        let mut p2 = enc(&[4], &[5]);
        p2.language = Language::L2;
        assert!(Batch::from_pairs(&[enc(&[4], &[5]), p2], 30).is_err());
    }

    #[test]
    fn interleave_examples() {
        use Language::*;
        assert_eq!(interleave(vec![L1; 3], vec![L2; 3]).unwrap(), vec![L1, L2, L1, L2, L1, L2]);
        assert_eq!(interleave(vec![], vec![L2; 2]).unwrap(), vec![L2, L2]);
        assert_eq!(interleave(vec![L1; 4], vec![L2; 2]).unwrap(), vec![L1, L2, L1, L2, L1, L1]);
        assert!(interleave::<Language>(vec![], vec![]).is_err());
        assert_eq!(interleave_rebalanced(vec![1, 2, 3], vec![9]).unwrap(), vec![1, 9, 2, 9, 3, 9]);
    }

    proptest! {
        #[test]
        fn batching_preserves_pairs(lens in proptest::collection::vec((1usize..6, 1usize..6), 1..40), bs in 1usize..9) {
            let pairs: Vec<_> = lens
                .iter()
                .enumerate()
                .map(|(i, &(q, r))| enc(&vec![4 + i; q], &vec![5 + i; r]))
                .collect();
            let batches = make_batches(&pairs, bs, 30).unwrap();
            let rows: Vec<EncodedPair> = batches.iter().flat_map(|b| (0..b.len()).map(move |i| b.row(i))).collect();
            prop_assert_eq!(rows, pairs);
        }
    }
}
