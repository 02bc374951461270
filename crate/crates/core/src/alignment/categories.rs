use alloc::collections::BTreeSet;
use serde::{Deserialize, Serialize};

use crate::corpus::{GoldAlignment, Link, PositionTag, TokenCategory};

/// Kinds of wrong hypothesis links. Checked in the order 3, 2, 1, 4, 5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCategory {
    /// 1: function or content word aligned to a finalizing token.
    StandardToFinalizing = 1,
    /// 2: prefix-only (non-direct translation) token aligned to a
    /// finalizing token.
    NonDirectToFinalizing = 2,
    /// 3: tail piece of a split word aligned to a finalizing token.
    SubwordTailToFinalizing = 3,
    /// 4: function word aligned to the content word after its source.
    FunctionToNextContent = 4,
    /// 5: anything else.
    Other = 5,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 5] = [
        ErrorCategory::StandardToFinalizing,
        ErrorCategory::NonDirectToFinalizing,
        ErrorCategory::SubwordTailToFinalizing,
        ErrorCategory::FunctionToNextContent,
        ErrorCategory::Other,
    ];

    pub fn number(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCategoryReport {
    /// Index `k` counts category `k + 1`.
    pub counts: [usize; 5],
    pub total: usize,
}

impl ErrorCategoryReport {
    pub fn add(&mut self, c: ErrorCategory) {
        self.counts[c.number() - 1] += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &ErrorCategoryReport) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    /// Share of errors per category; all zero when there are no errors.
    pub fn fractions(&self) -> [f64; 5] {
        let mut f = [0.0; 5];
        if self.total > 0 {
            for (o, &c) in f.iter_mut().zip(&self.counts) {
                *o = c as f64 / self.total as f64;
            }
        }
        f
    }
}

fn next_content_after(source: &[PositionTag], pos: usize) -> Option<usize> {
    (pos + 1..source.len()).find(|&j| source[j].category == TokenCategory::Content && !source[j].subword_tail)
}

/// Category of a hypothesis link that is not in the possible set.
pub fn categorize_error(link: Link, gold: &GoldAlignment, source: &[PositionTag], target: &[PositionTag]) -> ErrorCategory {
    let s = &source[link.src];
    let t = &target[link.tgt];
    if s.finalizing {
        if t.subword_tail {
            return ErrorCategory::SubwordTailToFinalizing;
        }
        if t.prefix_only {
            return ErrorCategory::NonDirectToFinalizing;
        }
        return ErrorCategory::StandardToFinalizing;
    }
    if t.category == TokenCategory::Function
        && gold
            .possible()
            .iter()
            .filter(|g| g.tgt == link.tgt)
            .any(|g| next_content_after(source, g.src) == Some(link.src))
    {
        return ErrorCategory::FunctionToNextContent;
    }
    ErrorCategory::Other
}

pub fn categorize_errors(
    hyp: &BTreeSet<Link>,
    gold: &GoldAlignment,
    source: &[PositionTag],
    target: &[PositionTag],
) -> ErrorCategoryReport {
    let mut report = ErrorCategoryReport::default();
    for &l in hyp.difference(gold.possible()) {
        report.add(categorize_error(l, gold, source, target));
    }
    report
}
