//! Synthetic parallel corpus with gold alignments known by construction.
//!
//! Source sentences are drawn from a small lexicon of function and content
//! words and closed by `.` and `</s>`. Each target sentence is produced by
//! translating the words one by one through a fixed bijective lexicon,
//! with three controlled deviations:
//!
//! * local reordering: "mover" content words hop forward over up to
//!   `reorder_window - 1` following words;
//! * subword splitting: a fixed subset of target words is always written
//!   as a first piece followed by one or more tail pieces;
//! * prefix-only insertion: after certain pairs of whole target words a
//!   marker token is inserted that depends only on the target prefix and
//!   has no gold link.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::example::{GoldAlignment, Link, ParallelExample, PositionTag};
use super::vocab::{TokenCategory, TokenInfo, Vocab, EOS_ID, FINAL_PUNCT_ID};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub sentences: usize,
    /// Inclusive sentence-length range, in source words.
    pub min_words: usize,
    pub max_words: usize,
    pub content_words: usize,
    pub function_words: usize,
    /// Probability that a source word slot holds a function word.
    pub function_rate: f64,
    /// Target words are spelled like their source words (copy task).
    pub identity_lexicon: bool,
    /// `1` keeps the target order monotone.
    pub reorder_window: usize,
    /// Fraction of content words that move when the window allows.
    pub mover_rate: f64,
    /// Share of target words, per class, always written as several pieces.
    pub split_prob: f64,
    /// Number of distinct tail pieces shared by split words.
    pub tail_pool: usize,
    pub max_tail_pieces: usize,
    /// Fraction of target tokens that are inserted prefix-only markers.
    pub prefix_only_rate: f64,
    pub prefix_only_tokens: usize,
    /// Cap on each vocabulary, specials included.
    pub max_vocab: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            sentences: 5000,
            min_words: 3,
            max_words: 9,
            content_words: 60,
            function_words: 10,
            function_rate: 0.3,
            identity_lexicon: false,
            reorder_window: 2,
            mover_rate: 0.3,
            split_prob: 0.1,
            tail_pool: 6,
            max_tail_pieces: 2,
            prefix_only_rate: 0.1,
            prefix_only_tokens: 3,
            max_vocab: 200,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    /// Monotone copy task: target equals source minus the closing marks.
    pub fn copy_task(sentences: usize, seed: u64) -> Self {
        CorpusSpec {
            sentences,
            identity_lexicon: true,
            reorder_window: 1,
            split_prob: 0.0,
            prefix_only_rate: 0.0,
            seed,
            ..CorpusSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, p) in [
            ("function_rate", self.function_rate),
            ("mover_rate", self.mover_rate),
            ("split_prob", self.split_prob),
            ("prefix_only_rate", self.prefix_only_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.sentences == 0 {
            return bad("sentences must be at least 1".into());
        }
        if self.reorder_window == 0 {
            return bad("reorder_window must be at least 1".into());
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad(format!("invalid length range {}..={}", self.min_words, self.max_words));
        }
        if self.content_words == 0 {
            return bad("content_words must be positive".into());
        }
        if self.function_words == 0 && self.function_rate > 0.0 {
            return bad("function_rate > 0 needs function words".into());
        }
        if self.split_prob > 0.0 && (self.tail_pool == 0 || self.max_tail_pieces == 0) {
            return bad("splitting needs a nonempty tail pool".into());
        }
        if self.prefix_only_rate > 0.0 && self.prefix_only_tokens == 0 {
            return bad("prefix-only insertion needs at least one marker token".into());
        }
        Ok(())
    }
}

/// Per target word spelling and prefix-only trigger flags.
#[derive(Clone, Debug)]
struct TargetWord {
    pieces: Vec<usize>,
    category: TokenCategory,
    /// Uniform draws compared against the trigger probability.
    opener: f64,
    closer: f64,
    eligible: bool,
    marker: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub source_tokens: usize,
    pub target_tokens: usize,
    pub subword_tails: usize,
    pub prefix_only: usize,
    pub moved_words: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCorpus {
    pub spec: CorpusSpec,
    pub source_vocab: Vocab,
    pub target_vocab: Vocab,
    pub examples: Vec<ParallelExample>,
    pub stats: CorpusStats,
}

fn check_vocab(v: &Vocab, limit: usize) -> Result<()> {
    if v.len() > limit {
        return Err(Error::VocabExhausted { needed: v.len(), limit });
    }
    Ok(())
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut src_vocab = Vocab::new();
    let src_function: Vec<usize> = (0..spec.function_words)
        .map(|i| src_vocab.push(TokenInfo::new(format!("f{i}"), TokenCategory::Function)))
        .collect();
    let src_content: Vec<usize> = (0..spec.content_words)
        .map(|i| src_vocab.push(TokenInfo::new(format!("s{i}"), TokenCategory::Content)))
        .collect();
    check_vocab(&src_vocab, spec.max_vocab)?;
    let mut mover = vec![false; src_vocab.len()];
    for &w in &src_content {
        mover[w] = rng.random::<f64>() < spec.mover_rate;
    }

    let mut tgt_vocab = Vocab::new();
    let name = |prefix: &str, i: usize, src: &Vocab, id: usize| {
        if spec.identity_lexicon {
            String::from(src.text(id))
        } else {
            format!("{prefix}{i}")
        }
    };
    let mut fn_perm: Vec<usize> = (0..spec.function_words).collect();
    let mut ct_perm: Vec<usize> = (0..spec.content_words).collect();
    if !spec.identity_lexicon {
        fn_perm.shuffle(&mut rng);
        ct_perm.shuffle(&mut rng);
    }
    let tails: Vec<usize> = if spec.split_prob > 0.0 {
        (0..spec.tail_pool)
            .map(|i| {
                let mut t = TokenInfo::new(format!("~{i}"), TokenCategory::Content);
                t.subword_continuation = true;
                tgt_vocab.push(t)
            })
            .collect()
    } else {
        Vec::new()
    };
    let markers: Vec<usize> = if spec.prefix_only_rate > 0.0 {
        (0..spec.prefix_only_tokens)
            .map(|i| {
                let mut t = TokenInfo::new(format!("p{i}"), TokenCategory::Content);
                t.prefix_only = true;
                tgt_vocab.push(t)
            })
            .collect()
    } else {
        Vec::new()
    };

    // exactly round(split_prob * n) words of each class are split
    let mut split_mask = |n: usize| -> Vec<bool> {
        let k = if tails.is_empty() { 0 } else { libm::round(spec.split_prob * n as f64) as usize };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut mask = vec![false; n];
        for &i in &order[..k.min(n)] {
            mask[i] = true;
        }
        mask
    };
    let fn_split = split_mask(src_function.len());
    let ct_split = split_mask(src_content.len());

    // lexicon[source id] = target spelling
    let mut lexicon: Vec<Option<TargetWord>> = vec![None; src_vocab.len()];
    let words = src_function
        .iter()
        .zip(&fn_perm)
        .zip(&fn_split)
        .map(|((&s, &p), &split)| (s, p, split, "F", TokenCategory::Function))
        .chain(
            src_content
                .iter()
                .zip(&ct_perm)
                .zip(&ct_split)
                .map(|((&s, &p), &split)| (s, p, split, "w", TokenCategory::Content)),
        );
    for (src_id, perm, split, prefix, category) in words {
        let text = name(prefix, perm, &src_vocab, src_id);
        let pieces = if split {
            let first = tgt_vocab.push(TokenInfo::new(format!("{text}_"), category));
            let n = rng.random_range(1..=spec.max_tail_pieces);
            let mut p = vec![first];
            p.extend((0..n).map(|_| tails[rng.random_range(0..tails.len())]));
            p
        } else {
            vec![tgt_vocab.push(TokenInfo::new(text, category))]
        };
        lexicon[src_id] = Some(TargetWord {
            eligible: category == TokenCategory::Content && !split && !markers.is_empty(),
            opener: rng.random::<f64>(),
            closer: rng.random::<f64>(),
            marker: if markers.is_empty() { 0 } else { markers[rng.random_range(0..markers.len())] },
            pieces,
            category,
        });
    }
    check_vocab(&tgt_vocab, spec.max_vocab)?;

    let sentences: Vec<(Vec<usize>, Vec<usize>)> = (0..spec.sentences)
        .map(|_| {
            let n = rng.random_range(spec.min_words..=spec.max_words);
            let source: Vec<usize> = (0..n)
                .map(|_| {
                    if !src_function.is_empty() && rng.random::<f64>() < spec.function_rate {
                        src_function[rng.random_range(0..src_function.len())]
                    } else {
                        src_content[rng.random_range(0..src_content.len())]
                    }
                })
                .collect();
            let order = reorder(&source, &mover, spec.reorder_window);
            (source, order)
        })
        .collect();

    let trigger = calibrate_trigger(&sentences, &lexicon, spec.prefix_only_rate);
    let (examples, stats) = translate(&sentences, &lexicon, trigger, &src_vocab);
    Ok(GeneratedCorpus { spec: spec.clone(), source_vocab: src_vocab, target_vocab: tgt_vocab, examples, stats })
}

/// Trigger probability whose realized marker fraction is closest to
/// `rate` from below, found by bisection over the fixed draws.
fn calibrate_trigger(sentences: &[(Vec<usize>, Vec<usize>)], lexicon: &[Option<TargetWord>], rate: f64) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    let realized = |q: f64| {
        let (mut markers, mut tokens) = (0usize, 0usize);
        for (source, order) in sentences {
            let (target, tags, _) = translate_one(source, order, lexicon, q);
            tokens += target.len();
            markers += tags.iter().filter(|t| t.prefix_only).count();
        }
        markers as f64 / tokens.max(1) as f64
    };
    if realized(1.0) <= rate {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if realized(mid) <= rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn translate(
    sentences: &[(Vec<usize>, Vec<usize>)],
    lexicon: &[Option<TargetWord>],
    trigger: f64,
    src_vocab: &Vocab,
) -> (Vec<ParallelExample>, CorpusStats) {
    let mut stats = CorpusStats { sentences: sentences.len(), ..CorpusStats::default() };
    let examples = sentences
        .iter()
        .map(|(words, order)| {
            let (target, target_tags, gold) = translate_one(words, order, lexicon, trigger);
            let mut source = words.clone();
            source.push(FINAL_PUNCT_ID);
            source.push(EOS_ID);
            let source_tags = ParallelExample::tags_from_vocab(&source, src_vocab);
            stats.moved_words += order.iter().enumerate().filter(|&(i, &j)| i != j).count();
            stats.subword_tails += target_tags.iter().filter(|t| t.subword_tail).count();
            stats.prefix_only += target_tags.iter().filter(|t| t.prefix_only).count();
            stats.source_tokens += source.len();
            stats.target_tokens += target.len();
            ParallelExample { source, target, gold, source_tags, target_tags }
        })
        .collect();
    (examples, stats)
}

fn translate_one(
    source: &[usize],
    order: &[usize],
    lexicon: &[Option<TargetWord>],
    trigger: f64,
) -> (Vec<usize>, Vec<PositionTag>, GoldAlignment) {
    let mut target = Vec::new();
    let mut tags = Vec::new();
    let mut gold = GoldAlignment::default();
    // whole[k] is the lexicon entry of target token k when it spells a whole word
    let mut whole: Vec<Option<&TargetWord>> = Vec::new();
    for (word_index, &src_pos) in order.iter().enumerate() {
        let w = lexicon[source[src_pos]].as_ref().expect("lexicon covers every source word");
        for (k, &piece) in w.pieces.iter().enumerate() {
            let t = target.len();
            if k == 0 {
                gold.add_sure(Link::new(src_pos, t));
            } else {
                gold.add_possible(Link::new(src_pos, t));
            }
            target.push(piece);
            tags.push(PositionTag {
                category: w.category,
                finalizing: false,
                subword_tail: k > 0,
                prefix_only: false,
                word: word_index,
            });
            whole.push(if w.pieces.len() == 1 { Some(w) } else { None });
        }
        let len = whole.len();
        if len >= 2 {
            if let (Some(a), Some(b)) = (whole[len - 2], whole[len - 1]) {
                if a.eligible && b.eligible && a.opener < trigger && b.closer < trigger {
                    target.push(b.marker);
                    tags.push(PositionTag {
                        category: TokenCategory::Content,
                        finalizing: false,
                        subword_tail: false,
                        prefix_only: true,
                        word: word_index,
                    });
                    whole.push(None);
                }
            }
        }
    }
    // markers share the index of the preceding word until renumbered
    renumber_words(&mut tags);
    (target, tags, gold)
}

fn renumber_words(tags: &mut [PositionTag]) {
    let mut word = 0;
    for i in 0..tags.len() {
        if i > 0 && !tags[i].subword_tail {
            word += 1;
        }
        tags[i].word = word;
    }
}

/// Target order as a list of source positions.
fn reorder(source: &[usize], mover: &[bool], window: usize) -> Vec<usize> {
    let n = source.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut k = 0;
    while k < n {
        if mover[source[order[k]]] {
            let mut j = k + 1;
            while j < n && j - k < window && !mover[source[order[j]]] {
                j += 1;
            }
            if j > k + 1 {
                order[k..j].rotate_left(1);
                k = j;
                continue;
            }
        }
        k += 1;
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn small(seed: u64) -> CorpusSpec {
        CorpusSpec { sentences: 200, seed, ..CorpusSpec::default() }
    }

    #[test]
    fn monotone_unsplit_corpus_has_diagonal_gold() {
        let spec = CorpusSpec {
            sentences: 50,
            reorder_window: 1,
            split_prob: 0.0,
            prefix_only_rate: 0.0,
            ..CorpusSpec::default()
        };
        let c = generate_corpus(&spec).unwrap();
        for ex in &c.examples {
            let diag: Vec<Link> = (0..ex.target.len()).map(|i| Link::new(i, i)).collect();
            assert_eq!(ex.gold.sure().iter().copied().collect::<Vec<_>>(), diag);
            assert_eq!(ex.gold.sure(), ex.gold.possible());
            assert_eq!(ex.target.len() + 2, ex.source.len());
        }
    }

    #[test]
    fn split_share_is_exact_per_class() {
        for seed in 0..4 {
            let c = generate_corpus(&CorpusSpec { sentences: 5000, seed, ..CorpusSpec::default() }).unwrap();
            let split_types = |cat: TokenCategory| {
                (0..c.target_vocab.len()).filter(|&i| {
                    let t = c.target_vocab.info(i);
                    t.category == cat && t.text.ends_with('_')
                })
                .count()
            };
            assert_eq!(split_types(TokenCategory::Function), 1);
            assert_eq!(split_types(TokenCategory::Content), 6);
            let (mut words, mut split) = (0, 0);
            for ex in &c.examples {
                let tags: Vec<_> = ex.target_tags.iter().filter(|t| !t.prefix_only).collect();
                let all: BTreeSet<usize> = tags.iter().map(|t| t.word).collect();
                let tails: BTreeSet<usize> = tags.iter().filter(|t| t.subword_tail).map(|t| t.word).collect();
                words += all.len();
                split += tails.len();
            }
            let rate = split as f64 / words as f64;
            assert!((rate - 0.1).abs() < 0.02, "seed {seed}: {rate}");
        }
    }

    #[test]
    fn full_split_on_one_word_sentence() {
        let spec = CorpusSpec {
            sentences: 20,
            min_words: 1,
            max_words: 1,
            split_prob: 1.0,
            prefix_only_rate: 0.0,
            ..CorpusSpec::default()
        };
        let c = generate_corpus(&spec).unwrap();
        for ex in &c.examples {
            assert!(ex.target.len() >= 2);
            assert!((0..ex.target.len()).all(|t| ex.gold.possible().contains(&Link::new(0, t))));
            assert_eq!(ex.gold.sure().iter().copied().collect::<Vec<_>>(), [Link::new(0, 0)]);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(generate_corpus(&small(3)).unwrap(), generate_corpus(&small(3)).unwrap());
        assert_ne!(generate_corpus(&small(3)).unwrap().examples, generate_corpus(&small(4)).unwrap().examples);
    }

    #[test]
    fn phenomena_occur_and_markers_are_unaligned() {
        let c = generate_corpus(&CorpusSpec { sentences: 1000, ..CorpusSpec::default() }).unwrap();
        assert!(c.stats.prefix_only > 0 && c.stats.subword_tails > 0 && c.stats.moved_words > 0);
        let marker_rate = c.stats.prefix_only as f64 / c.stats.target_tokens as f64;
        assert!((0.09..=0.1).contains(&marker_rate), "{marker_rate}");
        for ex in &c.examples {
            assert!(ex.is_consistent());
            for (t, tag) in ex.target_tags.iter().enumerate() {
                if tag.prefix_only {
                    assert!(ex.gold.possible().iter().all(|l| l.tgt != t));
                }
            }
            assert!(ex.gold.possible().iter().all(|l| !ex.source_tags[l.src].finalizing));
        }
        assert!(c.source_vocab.len() <= 200 && c.target_vocab.len() <= 200);
    }

    #[test]
    fn vocab_cap_is_enforced() {
        let spec = CorpusSpec { content_words: 500, ..small(0) };
        assert!(matches!(generate_corpus(&spec), Err(Error::VocabExhausted { .. })));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(CorpusSpec { reorder_window: 0, ..small(0) }.validate().is_err());
        assert!(CorpusSpec { sentences: 0, ..small(0) }.validate().is_err());
        assert!(CorpusSpec { split_prob: 1.5, ..small(0) }.validate().is_err());
        assert!(CorpusSpec { min_words: 5, max_words: 4, ..small(0) }.validate().is_err());
    }

    #[test]
    fn reorder_window_bounds_displacement() {
        let mover = [false, true, false, false];
        // ids: 1 is a mover
        assert_eq!(reorder(&[1, 0, 0], &mover, 1), [0, 1, 2]);
        assert_eq!(reorder(&[1, 0, 0], &mover, 2), [1, 0, 2]);
        assert_eq!(reorder(&[1, 0, 0], &mover, 3), [1, 2, 0]);
        assert_eq!(reorder(&[1, 1, 0], &mover, 2), [0, 2, 1]);
    }
}
