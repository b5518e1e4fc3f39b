use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::corpus::ConversationPair;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Bidirectional token/id map. Ids 0..4 are the reserved tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    /// Ranks tokens by descending frequency (ties keep first-occurrence order)
    /// and keeps the top `max_size - 4` after the reserved ids.
    pub fn build<'a, I>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ConversationPair>,
    {
        if max_size < RESERVED.len() {
            return Err(Error::Config(format!("vocabulary size {max_size} < {} reserved tokens", RESERVED.len())));
        }
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut seen_pairs = 0;
        for pair in corpus {
            seen_pairs += 1;
            for tok in pair.query.iter().chain(&pair.response) {
                if RESERVED.contains(&tok.as_str()) {
                    continue;
                }
                let next = counts.len();
                counts.entry(tok.as_str()).or_insert((0, next)).0 += 1;
            }
        }
        if seen_pairs == 0 {
            return Err(Error::Empty("build_vocab"));
        }
        let mut ranked: Vec<(&str, usize, usize)> = counts.into_iter().map(|(t, (c, first))| (t, c, first)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().take(max_size - RESERVED.len()).map(|(t, _, _)| t.to_string()));
        Ok(Vocabulary::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    /// One token per line in id order; the first four lines are the reserved tokens.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Format("vocabulary is missing the reserved-token header".into()));
        }
        let vocab = Vocabulary::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Format("vocabulary contains duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocabulary::from_text(&fs::read_to_string(path)?)
    }
}
