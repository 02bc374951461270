use alloc::vec::Vec;

use super::example::{GoldAlignment, ParallelExample, PositionTag};
use super::pharaoh::{parse_pharaoh, IndexBase};
use super::vocab::{TokenCategory, TokenInfo, Vocab, EOS_ID};
use crate::error::{Error, Result};

const SENTENCE_FINAL: [&str; 3] = [".", "!", "?"];
/// Piece marker of BPE-style external text: `walk@@ ing`.
const CONTINUES: &str = "@@";

fn is_punctuation(tok: &str) -> bool {
    !tok.is_empty() && tok.chars().all(|c| c.is_ascii_punctuation())
}

/// Collects every whitespace token of `text` into a vocabulary, in order
/// of first appearance.
pub fn vocab_from_text(text: &str) -> Vocab {
    let mut v = Vocab::new();
    for line in text.lines() {
        let mut tail = false;
        for tok in line.split_whitespace() {
            let category = if is_punctuation(tok) { TokenCategory::Punctuation } else { TokenCategory::Content };
            let mut info = TokenInfo::new(tok, category);
            info.subword_continuation = tail;
            if v.id(tok).is_none() {
                v.push(info);
            }
            tail = tok.ends_with(CONTINUES);
        }
    }
    v
}

fn tokenize(line: &str, vocab: &Vocab, close: bool) -> (Vec<usize>, Vec<PositionTag>) {
    let toks: Vec<&str> = line.split_whitespace().collect();
    let mut ids = Vec::with_capacity(toks.len() + 1);
    let mut tags = Vec::with_capacity(toks.len() + 1);
    let mut word = 0;
    for (i, tok) in toks.iter().enumerate() {
        let id = vocab.id_or_unk(tok);
        let info = vocab.info(id);
        let tail = i > 0 && (toks[i - 1].ends_with(CONTINUES) || (id != vocab.unk() && info.subword_continuation));
        if i > 0 && !tail {
            word += 1;
        }
        let category = if id == vocab.unk() {
            if is_punctuation(tok) { TokenCategory::Punctuation } else { TokenCategory::Content }
        } else {
            info.category
        };
        ids.push(id);
        tags.push(PositionTag {
            category,
            finalizing: i + 1 == toks.len() && SENTENCE_FINAL.contains(tok),
            subword_tail: tail,
            prefix_only: false,
            word,
        });
    }
    if close {
        ids.push(EOS_ID);
        tags.push(PositionTag {
            category: TokenCategory::Sentinel,
            finalizing: true,
            subword_tail: false,
            prefix_only: false,
            word: if toks.is_empty() { 0 } else { word + 1 },
        });
    }
    (ids, tags)
}

/// Builds examples from line-aligned, whitespace-tokenized text. `</s>` is
/// appended to every source line; targets are stored unframed. Without a
/// gold file all alignments are empty.
pub fn load_external_parallel(
    source: &str,
    target: &str,
    gold: Option<&str>,
    base: IndexBase,
    source_vocab: &Vocab,
    target_vocab: &Vocab,
) -> Result<Vec<ParallelExample>> {
    let src_lines: Vec<&str> = source.lines().collect();
    let tgt_lines: Vec<&str> = target.lines().collect();
    let gold_count = gold.map(|g| g.lines().count());
    if src_lines.len() != tgt_lines.len() || gold_count.is_some_and(|g| g != src_lines.len()) {
        return Err(Error::LineCountMismatch { source: src_lines.len(), target: tgt_lines.len(), gold: gold_count });
    }
    let mut examples: Vec<ParallelExample> = src_lines
        .iter()
        .zip(&tgt_lines)
        .map(|(s, t)| {
            let (source, source_tags) = tokenize(s, source_vocab, true);
            let (target, target_tags) = tokenize(t, target_vocab, false);
            ParallelExample { source, target, gold: GoldAlignment::default(), source_tags, target_tags }
        })
        .collect();
    if let Some(g) = gold {
        // the appended sentinel is not addressable by gold links
        let lengths: Vec<(usize, usize)> = examples.iter().map(|e| (e.source.len() - 1, e.target.len())).collect();
        for (ex, gold) in examples.iter_mut().zip(parse_pharaoh(g, base, Some(&lengths))?) {
            ex.gold = gold;
        }
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_lines_with_gold() {
        let src = "a b .\nc d\n";
        let tgt = "x y\nz w\n";
        let sv = vocab_from_text(src);
        let tv = vocab_from_text(tgt);
        let ex = load_external_parallel(src, tgt, Some("0-0 1-1\n0-1 1?0\n"), IndexBase::Zero, &sv, &tv).unwrap();
        assert_eq!(ex.len(), 2);
        assert!(ex[0].source_tags[2].finalizing);
        assert!(!ex[0].source_tags[1].finalizing);
        assert!(ex[0].source_tags[3].finalizing);
        assert_eq!(ex[0].source[2], sv.final_punct());
        assert_eq!(*ex[1].source.last().unwrap(), EOS_ID);
        assert!(!ex[1].source_tags[1].finalizing);
        assert_eq!(ex[1].gold.sure().len(), 1);
    }

    #[test]
    fn missing_gold_gives_empty_alignments() {
        let v = Vocab::new();
        let ex = load_external_parallel("a\nb\n", "c\nd\n", None, IndexBase::Zero, &v, &v).unwrap();
        assert!(ex.iter().all(|e| e.gold.is_empty()));
        assert!(ex.iter().all(|e| e.source[0] == v.unk()));
    }

    #[test]
    fn line_count_mismatch() {
        let v = Vocab::new();
        assert!(matches!(
            load_external_parallel("a\nb\n", "c\n", None, IndexBase::Zero, &v, &v),
            Err(Error::LineCountMismatch { .. })
        ));
        assert!(load_external_parallel("a\n", "c\n", Some("0-0\n0-0\n"), IndexBase::Zero, &v, &v).is_err());
    }

    #[test]
    fn bpe_pieces_share_a_word() {
        let v = vocab_from_text("walk@@ ing fast");
        let ex = load_external_parallel("walk@@ ing fast", "x", None, IndexBase::Zero, &v, &v).unwrap();
        let words: Vec<usize> = ex[0].source_tags.iter().map(|t| t.word).collect();
        assert_eq!(words, [0, 0, 1, 2]);
        assert!(ex[0].source_tags[1].subword_tail);
    }
}
