use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::aer::{collapse_gold_to_words, collapse_to_words, corpus_aer, AerResult};
use super::categories::{categorize_errors, ErrorCategoryReport};
use super::heads::{corpus_head_weights, head_contributions, GradientTarget, HeadContributions};
use super::{hard_alignment, mask_finalizing, soft_alignment, AlignmentMatrix, HeadWeights, Setting, Weighting};
use crate::corpus::{GoldAlignment, Link, ParallelExample};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::model::{forward_teacher_forced, AttentionRecord, ModelParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingMode {
    #[default]
    Average,
    HeadImportance,
    CorpusHeadImportance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AlignOptions {
    pub weighting: WeightingMode,
    pub mask: bool,
    pub setting: Setting,
    /// Collapse piece-level links to word level before scoring.
    pub word_level: bool,
}

/// Everything alignment extraction needs from one model pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzedExample {
    pub record: AttentionRecord,
    pub contributions: Option<HeadContributions>,
}

pub fn analyze_example(params: &ModelParams, example: &ParallelExample, with_contributions: bool) -> Result<AnalyzedExample> {
    let tgt = example.framed_target(params.config.eos_id);
    let record = forward_teacher_forced(params, &example.source, &tgt)?.record;
    let contributions =
        if with_contributions { Some(head_contributions(params, example, GradientTarget::Reference)?) } else { None };
    Ok(AnalyzedExample { record, contributions })
}

pub fn analyze_corpus<E: Executor>(
    params: &ModelParams,
    examples: &[ParallelExample],
    with_contributions: bool,
    exec: &E,
) -> Result<Vec<AnalyzedExample>> {
    let items: Vec<&ParallelExample> = examples.iter().collect();
    exec.map(items, |ex| analyze_example(params, ex, with_contributions)).into_iter().collect()
}

/// Hard alignment of one example at `layer`. `corpus_weights` (per layer)
/// is required for [`WeightingMode::CorpusHeadImportance`].
pub fn align_example(
    analyzed: &AnalyzedExample,
    example: &ParallelExample,
    layer: usize,
    options: &AlignOptions,
    corpus_weights: Option<&[Vec<f64>]>,
) -> Result<AlignmentMatrix> {
    let mut degenerate_positions = Vec::new();
    let (weights, weighting) = match options.weighting {
        WeightingMode::Average => (HeadWeights::Uniform, Weighting::Average),
        WeightingMode::HeadImportance => {
            let c = analyzed.contributions.as_ref().ok_or_else(|| {
                Error::InvalidConfig("head-importance weighting needs head contributions".into())
            })?;
            let layers = c.normalized.len();
            let per_pos = c.normalized.get(layer).ok_or(Error::LayerOutOfRange { layer, layers })?;
            degenerate_positions.extend(c.degenerate.iter().filter(|(l, _)| *l == layer).map(|(_, p)| *p));
            (HeadWeights::PerPosition(per_pos.clone()), Weighting::HeadImportance)
        }
        WeightingMode::CorpusHeadImportance => {
            let w = corpus_weights
                .ok_or_else(|| Error::InvalidConfig("corpus head-importance weighting needs corpus weights".into()))?;
            let layers = w.len();
            let w = w.get(layer).ok_or(Error::LayerOutOfRange { layer, layers })?;
            (HeadWeights::Fixed(w.clone()), Weighting::CorpusHeadImportance)
        }
    };
    let mut soft = soft_alignment(&analyzed.record, layer, &weights, options.setting)?;
    soft.provenance.weighting = weighting;
    let rows = soft.matrix.rows();
    soft.provenance.degenerate_rows = (0..rows).filter(|&r| degenerate_positions.contains(&options.setting.position(r))).collect();
    if options.mask {
        soft = mask_finalizing(&soft, &example.finalizing_columns())?;
    }
    Ok(hard_alignment(&soft))
}

/// Hypothesis and gold in the unit AER is computed over.
pub fn scoring_pair(hard: &AlignmentMatrix, example: &ParallelExample, word_level: bool) -> (BTreeSet<Link>, GoldAlignment) {
    let links = hard.links();
    if word_level {
        (
            collapse_to_words(&links, &example.source_tags, &example.target_tags),
            collapse_gold_to_words(&example.gold, &example.source_tags, &example.target_tags),
        )
    } else {
        (links, example.gold.clone())
    }
}

/// Index of the lowest AER. Ties go to the deeper layer for the
/// decoder-output setting and the shallower one for decoder-input.
pub fn select_best_layer(aers: &[f64], setting: Setting) -> usize {
    let mut best = 0;
    for (l, &a) in aers.iter().enumerate().skip(1) {
        let better = match setting {
            Setting::DecoderOutput => a <= aers[best],
            Setting::DecoderInput => a < aers[best],
        };
        if better {
            best = l;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTable {
    pub options: AlignOptions,
    pub per_layer: Vec<AerResult>,
    pub best_layer: usize,
    /// Per-layer weights used by the corpus head-importance mode.
    pub corpus_weights: Option<Vec<Vec<f64>>>,
}

impl LayerTable {
    pub fn aers(&self) -> Vec<f64> {
        self.per_layer.iter().map(|r| r.aer).collect()
    }

    pub fn best_aer(&self) -> f64 {
        self.per_layer[self.best_layer].aer
    }
}

pub fn hard_alignments(
    analyzed: &[AnalyzedExample],
    examples: &[ParallelExample],
    layer: usize,
    options: &AlignOptions,
    corpus_weights: Option<&[Vec<f64>]>,
) -> Result<Vec<AlignmentMatrix>> {
    analyzed.iter().zip(examples).map(|(a, ex)| align_example(a, ex, layer, options, corpus_weights)).collect()
}

fn corpus_weights_for(analyzed: &[AnalyzedExample], options: &AlignOptions) -> Result<Option<Vec<Vec<f64>>>> {
    if options.weighting != WeightingMode::CorpusHeadImportance {
        return Ok(None);
    }
    let contributions: Option<Vec<&HeadContributions>> = analyzed.iter().map(|a| a.contributions.as_ref()).collect();
    let contributions =
        contributions.ok_or_else(|| Error::InvalidConfig("corpus head-importance weighting needs head contributions".into()))?;
    Ok(Some(corpus_head_weights(&contributions)))
}

/// Corpus AER of every decoder layer and the selected best one.
pub fn layer_table(analyzed: &[AnalyzedExample], examples: &[ParallelExample], options: &AlignOptions) -> Result<LayerTable> {
    let layers = analyzed.first().map_or(0, |a| a.record.layers.len());
    let corpus_weights = corpus_weights_for(analyzed, options)?;
    let mut per_layer = Vec::with_capacity(layers);
    for layer in 0..layers {
        let hard = hard_alignments(analyzed, examples, layer, options, corpus_weights.as_deref())?;
        let pairs: Vec<(BTreeSet<Link>, GoldAlignment)> =
            hard.iter().zip(examples).map(|(h, ex)| scoring_pair(h, ex, options.word_level)).collect();
        per_layer.push(corpus_aer(pairs.iter().map(|(h, g)| (h, g))));
    }
    let aers: Vec<f64> = per_layer.iter().map(|r| r.aer).collect();
    Ok(LayerTable { options: *options, best_layer: select_best_layer(&aers, options.setting), per_layer, corpus_weights })
}

/// Error categories of the hard alignments at `layer`.
pub fn error_report(
    analyzed: &[AnalyzedExample],
    examples: &[ParallelExample],
    layer: usize,
    options: &AlignOptions,
) -> Result<ErrorCategoryReport> {
    let corpus_weights = corpus_weights_for(analyzed, options)?;
    let mut report = ErrorCategoryReport::default();
    for (h, ex) in hard_alignments(analyzed, examples, layer, options, corpus_weights.as_deref())?.iter().zip(examples) {
        report.merge(&categorize_errors(&h.links(), &ex.gold, &ex.source_tags, &ex.target_tags));
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestHead {
    pub layer: usize,
    pub head: usize,
    pub aer: f64,
}

/// The single head whose own hard alignment has the lowest corpus AER
/// (ties to the lowest layer, then head).
pub fn best_head(analyzed: &[AnalyzedExample], examples: &[ParallelExample], setting: Setting) -> Result<BestHead> {
    let Some(first) = analyzed.first() else {
        return Err(Error::InvalidConfig("no examples to select a head on".into()));
    };
    let (layers, heads) = (first.record.layers.len(), first.record.heads());
    let mut best: Option<BestHead> = None;
    for layer in 0..layers {
        for head in 0..heads {
            let mut w = vec![0.0; heads];
            w[head] = 1.0;
            let mut pairs = Vec::with_capacity(examples.len());
            for (a, ex) in analyzed.iter().zip(examples) {
                let mut soft = soft_alignment(&a.record, layer, &HeadWeights::Fixed(w.clone()), setting)?;
                soft.provenance.weighting = Weighting::SingleHead(head);
                pairs.push((hard_alignment(&soft).links(), ex.gold.clone()));
            }
            let aer = corpus_aer(pairs.iter().map(|(h, g)| (h, g))).aer;
            if best.is_none_or(|b| aer < b.aer) {
                best = Some(BestHead { layer, head, aer });
            }
        }
    }
    best.ok_or_else(|| Error::InvalidConfig("model has no heads".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_rules() {
        assert_eq!(select_best_layer(&[0.3], Setting::DecoderOutput), 0);
        assert_eq!(select_best_layer(&[0.2, 0.1, 0.1], Setting::DecoderOutput), 2);
        assert_eq!(select_best_layer(&[0.2, 0.1, 0.1], Setting::DecoderInput), 1);
        assert_eq!(select_best_layer(&[0.1, 0.3, 0.2], Setting::DecoderOutput), 0);
    }
}
