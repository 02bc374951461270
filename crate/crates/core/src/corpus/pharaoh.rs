//! Pharaoh alignment format: one sentence per line, `i-j` for sure and
//! `i?j` for possible links, `i` the source and `j` the target position.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;
use serde::{Deserialize, Serialize};

use super::example::{GoldAlignment, Link};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndexBase {
    #[default]
    Zero,
    One,
}

fn parse_index(s: &str, base: IndexBase, line: usize) -> Result<usize> {
    let v: usize = s.parse().map_err(|_| Error::Parse { line, message: format!("bad index {s:?}") })?;
    match base {
        IndexBase::Zero => Ok(v),
        IndexBase::One => v.checked_sub(1).ok_or(Error::Parse { line, message: String::from("index 0 in 1-based input") }),
    }
}

/// Parses one line. `line` is the 1-based line number used in errors.
pub fn parse_pharaoh_line(text: &str, base: IndexBase, line: usize) -> Result<GoldAlignment> {
    let mut gold = GoldAlignment::default();
    for pair in text.split_whitespace() {
        let (sep, sure) = match (pair.find('-'), pair.find('?')) {
            (Some(p), None) => (p, true),
            (None, Some(p)) => (p, false),
            _ => return Err(Error::Parse { line, message: format!("malformed pair {pair:?}") }),
        };
        let src = parse_index(&pair[..sep], base, line)?;
        let tgt = parse_index(&pair[sep + 1..], base, line)?;
        let link = Link::new(src, tgt);
        if sure {
            gold.add_sure(link);
        } else {
            gold.add_possible(link);
        }
    }
    Ok(gold)
}

/// Parses a whole file. With `lengths` (source, target per sentence) every
/// index is range-checked and the line count must match.
pub fn parse_pharaoh(text: &str, base: IndexBase, lengths: Option<&[(usize, usize)]>) -> Result<Vec<GoldAlignment>> {
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let gold = parse_pharaoh_line(l, base, i + 1)?;
        if let Some(lengths) = lengths {
            if let Some(&(src_len, tgt_len)) = lengths.get(i) {
                for link in gold.possible() {
                    if link.src >= src_len {
                        return Err(Error::IndexOverflow { line: i + 1, index: link.src, len: src_len });
                    }
                    if link.tgt >= tgt_len {
                        return Err(Error::IndexOverflow { line: i + 1, index: link.tgt, len: tgt_len });
                    }
                }
            }
        }
        out.push(gold);
    }
    if let Some(lengths) = lengths {
        if lengths.len() != out.len() {
            return Err(Error::LineCountMismatch { source: lengths.len(), target: lengths.len(), gold: Some(out.len()) });
        }
    }
    Ok(out)
}

/// One 0-based line: sure links as `i-j`, possible-only links as `i?j`,
/// sorted by source then target.
pub fn format_pharaoh_line(gold: &GoldAlignment) -> String {
    let mut s = String::new();
    for link in gold.possible() {
        if !s.is_empty() {
            s.push(' ');
        }
        let sep = if gold.sure().contains(link) { '-' } else { '?' };
        let _ = write!(s, "{}{}{}", link.src, sep, link.tgt);
    }
    s
}

pub fn format_pharaoh(alignments: &[GoldAlignment]) -> String {
    let mut s = String::new();
    for g in alignments {
        s.push_str(&format_pharaoh_line(g));
        s.push('\n');
    }
    s
}

/// Formats hypothesis links, all as sure.
pub fn format_links<'l>(links: impl IntoIterator<Item = &'l Link>) -> String {
    let g = GoldAlignment::new(links.into_iter().copied(), core::iter::empty());
    format_pharaoh_line(&g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn links(pairs: &[(usize, usize)]) -> Vec<Link> {
        pairs.iter().map(|&(s, t)| Link::new(s, t)).collect()
    }

    #[test]
    fn sure_only_line() {
        let g = parse_pharaoh_line("0-0 1-1", IndexBase::Zero, 1).unwrap();
        assert_eq!(g.sure().iter().copied().collect::<Vec<_>>(), links(&[(0, 0), (1, 1)]));
        assert_eq!(g.sure(), g.possible());
    }

    #[test]
    fn mixed_line() {
        let g = parse_pharaoh_line("0-0 1?2", IndexBase::Zero, 1).unwrap();
        assert_eq!(g.sure().iter().copied().collect::<Vec<_>>(), links(&[(0, 0)]));
        assert_eq!(g.possible().iter().copied().collect::<Vec<_>>(), links(&[(0, 0), (1, 2)]));
    }

    #[test]
    fn empty_line() {
        assert!(parse_pharaoh_line("", IndexBase::Zero, 1).unwrap().is_empty());
    }

    #[test]
    fn round_trips() {
        for line in ["0-0 1-1", "0-0 1?2", ""] {
            let g = parse_pharaoh_line(line, IndexBase::Zero, 1).unwrap();
            assert_eq!(format_pharaoh_line(&g), line);
            let back = parse_pharaoh(&format_pharaoh(&[g.clone()]), IndexBase::Zero, None).unwrap();
            assert_eq!(back, [g]);
        }
    }

    #[test]
    fn one_based_input_is_shifted() {
        let g = parse_pharaoh_line("1-1 2?3", IndexBase::One, 1).unwrap();
        assert_eq!(format_pharaoh_line(&g), "0-0 1?2");
        assert!(parse_pharaoh_line("0-1", IndexBase::One, 1).is_err());
    }

    #[test]
    fn errors() {
        assert!(matches!(parse_pharaoh_line("0:1", IndexBase::Zero, 4), Err(Error::Parse { line: 4, .. })));
        assert!(parse_pharaoh_line("a-1", IndexBase::Zero, 1).is_err());
        assert!(parse_pharaoh_line("1-2-3", IndexBase::Zero, 1).is_err());
        let r = parse_pharaoh("0-0\n3-1\n", IndexBase::Zero, Some(&[(2, 2), (2, 2)]));
        assert!(matches!(r, Err(Error::IndexOverflow { line: 2, index: 3, len: 2 })));
        assert!(parse_pharaoh("0-0\n", IndexBase::Zero, Some(&[(2, 2), (2, 2)])).is_err());
    }
}
