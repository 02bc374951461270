use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::corpus::{GoldAlignment, Link, PositionTag};

/// `|A|`, `|S|`, `|A∩S|`, `|A∩P|` for one or more sentences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AerCounts {
    pub hypothesis: usize,
    pub sure: usize,
    pub hyp_and_sure: usize,
    pub hyp_and_possible: usize,
}

impl AerCounts {
    pub fn of(hyp: &BTreeSet<Link>, gold: &GoldAlignment) -> Self {
        AerCounts {
            hypothesis: hyp.len(),
            sure: gold.sure().len(),
            hyp_and_sure: hyp.intersection(gold.sure()).count(),
            hyp_and_possible: hyp.intersection(gold.possible()).count(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.hypothesis + self.sure == 0
    }

    /// `1 − (|A∩S| + |A∩P|) / (|A| + |S|)`, or 0 when both sets are empty.
    pub fn aer(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        1.0 - (self.hyp_and_sure + self.hyp_and_possible) as f64 / (self.hypothesis + self.sure) as f64
    }

    pub fn merge(&mut self, other: &AerCounts) {
        self.hypothesis += other.hypothesis;
        self.sure += other.sure;
        self.hyp_and_sure += other.hyp_and_sure;
        self.hyp_and_possible += other.hyp_and_possible;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AerResult {
    pub aer: f64,
    /// Pooled over all sentences.
    pub counts: AerCounts,
    pub per_sentence: Vec<AerCounts>,
    /// Nothing to align: `|A| + |S| = 0`.
    pub empty: bool,
}

pub fn aer(hyp: &BTreeSet<Link>, gold: &GoldAlignment) -> AerResult {
    corpus_aer([(hyp, gold)])
}

/// Corpus AER from counts pooled before the final ratio.
pub fn corpus_aer<'a>(pairs: impl IntoIterator<Item = (&'a BTreeSet<Link>, &'a GoldAlignment)>) -> AerResult {
    let mut counts = AerCounts::default();
    let per_sentence: Vec<AerCounts> = pairs
        .into_iter()
        .map(|(h, g)| {
            let c = AerCounts::of(h, g);
            counts.merge(&c);
            c
        })
        .collect();
    AerResult { aer: counts.aer(), counts, per_sentence, empty: counts.is_empty() }
}

/// Maps piece-level links to word-level links: any piece pair makes a
/// word pair.
pub fn collapse_to_words(links: &BTreeSet<Link>, source: &[PositionTag], target: &[PositionTag]) -> BTreeSet<Link> {
    links.iter().map(|l| Link::new(source[l.src].word, target[l.tgt].word)).collect()
}

/// Word-level gold from piece-level gold. A word pair is sure when any of
/// its piece pairs is sure.
pub fn collapse_gold_to_words(gold: &GoldAlignment, source: &[PositionTag], target: &[PositionTag]) -> GoldAlignment {
    GoldAlignment::new(collapse_to_words(gold.sure(), source, target), collapse_to_words(gold.possible(), source, target))
}
