//! Corpus IO, vocabularies, batching and bilingual scheduling.

mod batch;
mod corpus;
pub mod synth;
mod vocab;

pub use batch::{encode_all, interleave, interleave_rebalanced, make_batches, Batch, EncodedPair};
pub use corpus::{load_tsv, read_tsv, save_tsv, tokenize, write_tsv, ConversationPair, Language};
pub use synth::{gen_synthetic_bilingual, SharedRule, SynthSpec, SyntheticCorpus};
pub use vocab::{Vocabulary, BOS, EOS, PAD, RESERVED, UNK};
