//! Corpus directories on disk.
//!
//! A generated corpus directory holds:
//!
//! * `examples.jsonl`: one [`ParallelExample`] per line (ids, tags, gold);
//! * `source.txt`, `target.txt`: whitespace-joined tokens, source lines
//!   without the trailing `</s>`;
//! * `gold.pharaoh`: 0-based gold links, source index first;
//! * `vocab.json`, `corpus_spec.json`, `stats.json`.

use std::fs;
use std::path::{Path, PathBuf};

use attnalign_core::corpus::{
    format_pharaoh, load_external_parallel, vocab_from_text, CorpusSpec, CorpusStats, GeneratedCorpus, IndexBase,
    ParallelExample, Vocab,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, PathContext, Result};
use crate::metrics::{read_json, read_json_lines, write_json, JsonLines};

pub const EXAMPLES: &str = "examples.jsonl";
pub const SOURCE_TEXT: &str = "source.txt";
pub const TARGET_TEXT: &str = "target.txt";
pub const GOLD: &str = "gold.pharaoh";
pub const VOCAB: &str = "vocab.json";
pub const SPEC: &str = "corpus_spec.json";
pub const STATS: &str = "stats.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabPair {
    pub source: Vocab,
    pub target: Vocab,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedCorpus {
    pub source_vocab: Vocab,
    pub target_vocab: Vocab,
    pub examples: Vec<ParallelExample>,
}

fn line(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter().map(|&i| vocab.text(i)).collect::<Vec<_>>().join(" ")
}

pub fn write_generated(dir: &Path, corpus: &GeneratedCorpus) -> Result<()> {
    let mut examples = JsonLines::create(&dir.join(EXAMPLES))?;
    let (mut src, mut tgt) = (String::new(), String::new());
    let eos = corpus.source_vocab.eos();
    for ex in &corpus.examples {
        examples.write(ex)?;
        let body = ex.source.strip_suffix(&[eos]).unwrap_or(&ex.source);
        src.push_str(&line(body, &corpus.source_vocab));
        src.push('\n');
        tgt.push_str(&line(&ex.target, &corpus.target_vocab));
        tgt.push('\n');
    }
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).at(&p)
    };
    write(SOURCE_TEXT, &src)?;
    write(TARGET_TEXT, &tgt)?;
    let gold: Vec<_> = corpus.examples.iter().map(|e| e.gold.clone()).collect();
    write(GOLD, &format_pharaoh(&gold))?;
    write_json(
        &dir.join(VOCAB),
        &VocabPair { source: corpus.source_vocab.clone(), target: corpus.target_vocab.clone() },
    )?;
    write_json(&dir.join(SPEC), &corpus.spec)?;
    write_json(&dir.join(STATS), &corpus.stats)
}

pub fn read_spec(path: &Path) -> Result<CorpusSpec> {
    read_json(path)
}

pub fn read_stats(dir: &Path) -> Result<CorpusStats> {
    read_json(&dir.join(STATS))
}

/// Loads a directory written by [`write_generated`].
pub fn load_generated(dir: &Path) -> Result<LoadedCorpus> {
    if !dir.is_dir() {
        return Err(CliError::data(format!("{}: not a corpus directory", dir.display())));
    }
    let vocab: VocabPair = read_json(&dir.join(VOCAB))?;
    let examples: Vec<ParallelExample> = read_json_lines(&dir.join(EXAMPLES))?;
    for (i, ex) in examples.iter().enumerate() {
        let bad_id = ex.source.iter().any(|&t| t >= vocab.source.len()) || ex.target.iter().any(|&t| t >= vocab.target.len());
        if bad_id || !ex.is_consistent() {
            return Err(CliError::data(format!("{}: sentence {} is inconsistent", dir.join(EXAMPLES).display(), i + 1)));
        }
    }
    Ok(LoadedCorpus { source_vocab: vocab.source, target_vocab: vocab.target, examples })
}

/// Line-aligned plain text with optional Pharaoh gold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextCorpus {
    pub source: PathBuf,
    pub target: PathBuf,
    pub gold: Option<PathBuf>,
    pub base: IndexBase,
}

/// Tokenizes text files against `vocabs` (usually a checkpoint's), or
/// against vocabularies collected from the text itself.
pub fn load_text(text: &TextCorpus, vocabs: Option<(&Vocab, &Vocab)>) -> Result<LoadedCorpus> {
    let source = fs::read_to_string(&text.source).at(&text.source)?;
    let target = fs::read_to_string(&text.target).at(&text.target)?;
    let gold = match &text.gold {
        Some(p) => Some(fs::read_to_string(p).at(p)?),
        None => None,
    };
    let (source_vocab, target_vocab) = match vocabs {
        Some((s, t)) => (s.clone(), t.clone()),
        None => (vocab_from_text(&source), vocab_from_text(&target)),
    };
    let examples = load_external_parallel(&source, &target, gold.as_deref(), text.base, &source_vocab, &target_vocab)?;
    Ok(LoadedCorpus { source_vocab, target_vocab, examples })
}
