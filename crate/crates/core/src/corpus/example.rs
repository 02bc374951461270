use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenCategory, Vocab};

/// An alignment link between source position `src` and target position
/// `tgt`, both 0-based. Target positions count content tokens only (the
/// framing `</s>` sentinels are excluded); source positions include the
/// closing punctuation and `</s>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Link {
    pub src: usize,
    pub tgt: usize,
}

impl Link {
    pub fn new(src: usize, tgt: usize) -> Self {
        Link { src, tgt }
    }
}

/// Gold sure and possible links with `sure ⊆ possible`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAlignment {
    sure: BTreeSet<Link>,
    possible: BTreeSet<Link>,
}

impl GoldAlignment {
    /// Every sure link is also added to the possible set.
    pub fn new(sure: impl IntoIterator<Item = Link>, possible: impl IntoIterator<Item = Link>) -> Self {
        let sure: BTreeSet<Link> = sure.into_iter().collect();
        let mut possible: BTreeSet<Link> = possible.into_iter().collect();
        possible.extend(sure.iter().copied());
        GoldAlignment { sure, possible }
    }

    pub fn sure(&self) -> &BTreeSet<Link> {
        &self.sure
    }

    pub fn possible(&self) -> &BTreeSet<Link> {
        &self.possible
    }

    pub fn add_sure(&mut self, l: Link) {
        self.sure.insert(l);
        self.possible.insert(l);
    }

    pub fn add_possible(&mut self, l: Link) {
        self.possible.insert(l);
    }

    pub fn is_empty(&self) -> bool {
        self.possible.is_empty()
    }
}

/// Per-position metadata used by the error categorizer and probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionTag {
    pub category: TokenCategory,
    pub finalizing: bool,
    pub subword_tail: bool,
    pub prefix_only: bool,
    /// Index of the word this piece belongs to.
    pub word: usize,
}

impl PositionTag {
    /// Label used when grouping statistics by token type.
    pub fn label(&self) -> &'static str {
        if self.prefix_only {
            "prefix-only"
        } else if self.subword_tail {
            "subword-tail"
        } else {
            match self.category {
                TokenCategory::Function => "function",
                TokenCategory::Content => "content",
                TokenCategory::Punctuation => "punctuation",
                TokenCategory::Sentinel => "sentinel",
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelExample {
    /// Source ids, closed by `</s>` (preceded by final punctuation when the
    /// sentence has one).
    pub source: Vec<usize>,
    /// Target content ids without sentinels.
    pub target: Vec<usize>,
    pub gold: GoldAlignment,
    pub source_tags: Vec<PositionTag>,
    pub target_tags: Vec<PositionTag>,
}

impl ParallelExample {
    /// `</s> y_1 … y_m </s>`.
    pub fn framed_target(&self, eos: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.target.len() + 2);
        out.push(eos);
        out.extend_from_slice(&self.target);
        out.push(eos);
        out
    }

    pub fn finalizing_columns(&self) -> Vec<usize> {
        self.source_tags.iter().enumerate().filter(|(_, t)| t.finalizing).map(|(i, _)| i).collect()
    }

    /// Checks link ranges and tag lengths.
    pub fn is_consistent(&self) -> bool {
        self.source_tags.len() == self.source.len()
            && self.target_tags.len() == self.target.len()
            && self.gold.possible().iter().all(|l| l.src < self.source.len() && l.tgt < self.target.len())
            && self.gold.sure().is_subset(self.gold.possible())
    }

    /// Tags derived from vocabulary flags, with word indices that merge
    /// continuation pieces into the preceding word.
    pub fn tags_from_vocab(ids: &[usize], vocab: &Vocab) -> Vec<PositionTag> {
        let mut word = 0usize;
        ids.iter()
            .enumerate()
            .map(|(i, &id)| {
                let info = vocab.info(id);
                if i > 0 && !info.subword_continuation {
                    word += 1;
                }
                PositionTag {
                    category: info.category,
                    finalizing: info.finalizing,
                    subword_tail: info.subword_continuation,
                    prefix_only: info.prefix_only,
                    word,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sure_links_are_possible() {
        let g = GoldAlignment::new([Link::new(0, 0)], [Link::new(1, 2)]);
        assert!(g.sure().is_subset(g.possible()));
        assert_eq!(g.possible().len(), 2);
    }
}
