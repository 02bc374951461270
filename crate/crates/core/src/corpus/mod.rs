//! Parallel corpora: a synthetic generator with gold alignments known by
//! construction, external text ingestion and Pharaoh alignment files.

mod example;
mod external;
mod generate;
mod pharaoh;
mod vocab;

pub use example::{GoldAlignment, Link, ParallelExample, PositionTag};
pub use external::{load_external_parallel, vocab_from_text};
pub use generate::{generate_corpus, CorpusSpec, CorpusStats, GeneratedCorpus};
pub use pharaoh::{format_links, format_pharaoh, format_pharaoh_line, parse_pharaoh, parse_pharaoh_line, IndexBase};
pub use vocab::{TokenCategory, TokenInfo, Vocab, EOS_ID, FINAL_PUNCT_ID, UNK_ID};
