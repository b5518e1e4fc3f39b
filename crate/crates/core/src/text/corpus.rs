use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Language {
    L1,
    L2,
}

impl Language {
    pub const ALL: [Language; 2] = [Language::L1, Language::L2];

    pub fn index(self) -> usize {
        match self {
            Language::L1 => 0,
            Language::L2 => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Language::L1 => "L1",
            Language::L2 => "L2",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "L1" => Ok(Language::L1),
            "L2" => Ok(Language::L2),
            _ => Err(Error::UnknownLanguage(s.to_string())),
        }
    }
}

/// A single-turn exchange: a query and the response to it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConversationPair {
    pub query: Vec<String>,
    pub response: Vec<String>,
    pub language: Language,
}

pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

impl ConversationPair {
    /// Whitespace-tokenizes both sides; `None` if either side is empty.
    pub fn from_text(query: &str, response: &str, language: Language) -> Option<Self> {
        let query = tokenize(query);
        let response = tokenize(response);
        if query.is_empty() || response.is_empty() {
            return None;
        }
        Some(ConversationPair { query, response, language })
    }

    pub fn query_text(&self) -> String {
        self.query.join(" ")
    }

    pub fn response_text(&self) -> String {
        self.response.join(" ")
    }
}

/// Parses `query<TAB>response` lines. Blank lines and pairs with an empty side
/// are dropped; a line without a tab is an error.
pub fn read_tsv<R: BufRead>(reader: R, language: Language, origin: &Path) -> Result<Vec<ConversationPair>> {
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some((q, r)) = line.split_once('\t') else {
            return Err(Error::Corpus {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: "expected `query<TAB>response`".into(),
            });
        };
        if let Some(p) = ConversationPair::from_text(q, r, language) {
            pairs.push(p);
        }
    }
    Ok(pairs)
}

pub fn load_tsv(path: &Path, language: Language) -> Result<Vec<ConversationPair>> {
    let file = fs::File::open(path)?;
    read_tsv(BufReader::new(file), language, path)
}

pub fn write_tsv<W: Write>(mut w: W, pairs: &[ConversationPair]) -> Result<()> {
    for p in pairs {
        writeln!(w, "{}\t{}", p.query_text(), p.response_text())?;
    }
    Ok(())
}

pub fn save_tsv(path: &Path, pairs: &[ConversationPair]) -> Result<()> {
    let mut buf = Vec::new();
    write_tsv(&mut buf, pairs)?;
    fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_filters() {
        let text = "a b\tc\n\n  \tx\nd\te f\n";
        let pairs = read_tsv(text.as_bytes(), Language::L2, Path::new("mem")).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].response, vec!["e", "f"]);
        assert_eq!(pairs[0].language, Language::L2);
    }

    #[test]
    fn missing_tab_names_line() {
        let err = read_tsv("a\tb\nno tab here\n".as_bytes(), Language::L1, Path::new("c.tsv")).unwrap_err();
        assert!(err.to_string().contains("c.tsv:2"), "{err}");
    }

    #[test]
    fn language_parsing() {
        assert_eq!("l2".parse::<Language>().unwrap(), Language::L2);
        assert!(matches!("fr".parse::<Language>(), Err(Error::UnknownLanguage(_))));
    }
}
