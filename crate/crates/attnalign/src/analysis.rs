//! Whole-corpus analysis of one trained model: layer tables for every
//! extraction variant, head-importance sanity, probes and the
//! attention/attribution correlation.

use std::collections::BTreeMap;

use attnalign_core::alignment::{
    analyze_corpus, best_head, error_report, hard_alignments, layer_table, soft_alignment, AlignOptions,
    AnalyzedExample, BestHead, ErrorCategoryReport, HeadWeights, Setting, WeightingMode,
};
use attnalign_core::attribution::{attribute, finalizing_mass_and_target_share, AttributionParts, PerturbationConfig};
use attnalign_core::corpus::ParallelExample;
use attnalign_core::model::ModelParams;
use attnalign_core::probes::{
    cosine_aggregates, encoder_cosine, finalizing_attention_rate, min_norm_summary, output_norm_vs_finalizing_mass,
    MinNormSummary, PairCategory, RateEntry, Summary,
};
use attnalign_core::seed::derive_seed;
use attnalign_core::stats::spearman;
use attnalign_core::{Executor, Sequential};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisOptions {
    /// Finalizing-mass threshold for the attention-rate table.
    pub threshold: f64,
    /// Sentences (from the front of the set) used for the attribution
    /// correlation; 0 skips it.
    pub attribution_sentences: usize,
    pub perturbation: PerturbationConfig,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions { threshold: 0.3, attribution_sentences: 100, perturbation: PerturbationConfig::default() }
    }
}

/// Corpus AER of one extraction variant at every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub setting: Setting,
    pub weighting: WeightingMode,
    pub mask: bool,
    pub per_layer: Vec<f64>,
    pub best_layer: usize,
    pub best_aer: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadImportanceCheck {
    pub positions: usize,
    /// Largest `|Σ_h C_h − 1|` over every layer and step.
    pub max_sum_error: f64,
    pub degenerate_positions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub sentences: usize,
    pub points: usize,
    pub spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAnalysis {
    pub sentences: usize,
    pub variants: Vec<VariantRow>,
    /// Links into finalizing columns across every masked variant and layer.
    pub masked_finalizing_links: usize,
    pub head_importance: HeadImportanceCheck,
    /// Best single head under the decoder-output setting.
    pub best_head: BestHead,
    pub min_norm: MinNormSummary,
    /// Per head (`[layer][head]`) of the same statistic.
    pub min_norm_by_head: Vec<Vec<MinNormSummary>>,
    /// Attention mass on finalizing tokens vs target-prefix share.
    pub correlation: Correlation,
    /// Attention output norm vs finalizing mass at the best layer.
    pub output_norm_correlation: Option<f64>,
    pub finalizing_rates: BTreeMap<String, RateEntry>,
    pub error_categories: ErrorCategoryReport,
    pub encoder_cosine: BTreeMap<PairCategory, Summary>,
}

impl SeedAnalysis {
    pub fn variant(&self, setting: Setting, weighting: WeightingMode, mask: bool) -> Option<&VariantRow> {
        self.variants.iter().find(|v| v.setting == setting && v.weighting == weighting && v.mask == mask)
    }

    /// Best-layer AER of a variant.
    pub fn best_aer(&self, setting: Setting, weighting: WeightingMode, mask: bool) -> f64 {
        self.variant(setting, weighting, mask).map_or(f64::NAN, |v| v.best_aer)
    }
}

pub const SETTINGS: [Setting; 2] = [Setting::DecoderOutput, Setting::DecoderInput];
pub const WEIGHTINGS: [WeightingMode; 3] =
    [WeightingMode::Average, WeightingMode::HeadImportance, WeightingMode::CorpusHeadImportance];

fn head_importance_check(analyzed: &[AnalyzedExample]) -> HeadImportanceCheck {
    let mut check = HeadImportanceCheck { positions: 0, max_sum_error: 0.0, degenerate_positions: 0 };
    for c in analyzed.iter().filter_map(|a| a.contributions.as_ref()) {
        check.degenerate_positions += c.degenerate.len();
        for per_pos in &c.normalized {
            for w in per_pos {
                check.positions += 1;
                check.max_sum_error = check.max_sum_error.max((w.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    check
}

/// Finalizing-mass vs target-share points of the first `opts.attribution_sentences`
/// sentences, read at `layer` under the decoder-output setting.
pub fn correlation<E: Executor>(
    params: &ModelParams,
    analyzed: &[AnalyzedExample],
    examples: &[ParallelExample],
    layer: usize,
    opts: &AnalysisOptions,
    exec: &E,
) -> Result<Correlation> {
    let n = opts.attribution_sentences.min(examples.len());
    let items: Vec<(usize, (&AnalyzedExample, &ParallelExample))> =
        analyzed.iter().zip(examples).take(n).enumerate().collect();
    let per_sentence = exec.map(items, |(i, (a, ex))| -> attnalign_core::Result<Vec<(f64, f64)>> {
        let cfg = PerturbationConfig { seed: derive_seed(&[opts.perturbation.seed, i as u64]), ..opts.perturbation };
        let report = attribute(params, ex, &cfg, AttributionParts::default(), &Sequential)?;
        let soft = soft_alignment(&a.record, layer, &HeadWeights::Uniform, Setting::DecoderOutput)?;
        Ok(finalizing_mass_and_target_share(&soft, &report, ex))
    });
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for points in per_sentence {
        for (m, s) in points? {
            xs.push(m);
            ys.push(s);
        }
    }
    Ok(Correlation { sentences: n, points: xs.len(), spearman: spearman(&xs, &ys) })
}

/// Runs every analysis over `examples` with dropout-free passes.
pub fn analyze<E: Executor>(
    params: &ModelParams,
    examples: &[ParallelExample],
    opts: &AnalysisOptions,
    exec: &E,
) -> Result<(Vec<AnalyzedExample>, SeedAnalysis)> {
    opts.perturbation.validate()?;
    let analyzed = analyze_corpus(params, examples, true, exec)?;
    let mut variants = Vec::new();
    let mut masked_finalizing_links = 0;
    for setting in SETTINGS {
        for weighting in WEIGHTINGS {
            for mask in [false, true] {
                let options = AlignOptions { weighting, mask, setting, word_level: false };
                let table = layer_table(&analyzed, examples, &options)?;
                if mask {
                    for layer in 0..table.per_layer.len() {
                        let hard = hard_alignments(&analyzed, examples, layer, &options, table.corpus_weights.as_deref())?;
                        for (h, ex) in hard.iter().zip(examples) {
                            let fin = ex.finalizing_columns();
                            masked_finalizing_links += h.columns.iter().filter(|c| fin.contains(c)).count();
                        }
                    }
                }
                variants.push(VariantRow {
                    setting,
                    weighting,
                    mask,
                    per_layer: table.aers(),
                    best_layer: table.best_layer,
                    best_aer: table.best_aer(),
                });
            }
        }
    }
    let baseline = variants[0].clone();
    let head = best_head(&analyzed, examples, Setting::DecoderOutput)?;
    let pairs = || analyzed.iter().map(|a| &a.record).zip(examples);
    let min_norm = min_norm_summary(pairs(), head.layer, head.head)?;
    let (layers, heads) = (analyzed.first().map_or(0, |a| a.record.layers.len()), params.config.heads);
    let min_norm_by_head = (0..layers)
        .map(|l| (0..heads).map(|h| min_norm_summary(pairs(), l, h)).collect::<attnalign_core::Result<Vec<_>>>())
        .collect::<attnalign_core::Result<Vec<_>>>()?;
    let correlation = correlation(params, &analyzed, examples, baseline.best_layer, opts, exec)?;
    let output_norm_correlation = output_norm_vs_finalizing_mass(pairs(), baseline.best_layer)?;
    let softs = analyzed
        .iter()
        .map(|a| soft_alignment(&a.record, baseline.best_layer, &HeadWeights::Uniform, Setting::DecoderOutput))
        .collect::<attnalign_core::Result<Vec<_>>>()?;
    let finalizing_rates = finalizing_attention_rate(softs.iter().zip(examples), opts.threshold)?;
    let error_categories = error_report(&analyzed, examples, baseline.best_layer, &AlignOptions::default())?;
    let cosines: Vec<_> = analyzed.iter().map(|a| encoder_cosine(&a.record)).collect();
    let encoder_cosine = cosine_aggregates(cosines.iter().zip(examples).map(|(c, ex)| (c, ex.source_tags.as_slice())));
    let analysis = SeedAnalysis {
        sentences: examples.len(),
        variants,
        masked_finalizing_links,
        head_importance: head_importance_check(&analyzed),
        best_head: head,
        min_norm,
        min_norm_by_head,
        correlation,
        output_norm_correlation,
        finalizing_rates,
        error_categories,
        encoder_cosine,
    };
    Ok((analyzed, analysis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use attnalign_core::corpus::{generate_corpus, CorpusSpec};
    use attnalign_core::model::ModelConfig;
    use rand::SeedableRng;

    #[test]
    fn untrained_model_analysis_is_complete_and_consistent() {
        let c = generate_corpus(&CorpusSpec { sentences: 12, seed: 3, ..CorpusSpec::default() }).unwrap();
        let config = ModelConfig { d_model: 16, d_ff: 16, heads: 2, ..ModelConfig::desk(c.source_vocab.len(), c.target_vocab.len()) };
        let params = ModelParams::init(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        let opts = AnalysisOptions {
            attribution_sentences: 3,
            perturbation: PerturbationConfig { samples: 4, ..PerturbationConfig::default() },
            ..AnalysisOptions::default()
        };
        let (analyzed, a) = analyze(&params, &c.examples, &opts, &crate::exec::Rayon).unwrap();
        assert_eq!(analyzed.len(), 12);
        assert_eq!(a.variants.len(), 12);
        assert_eq!(a.masked_finalizing_links, 0);
        assert!(a.head_importance.max_sum_error < 1e-9);
        assert_eq!(a.correlation.sentences, 3);
        assert_eq!(a.min_norm_by_head.len(), 2);
        assert_eq!(a.min_norm.sentences, 12);
        let (_, again) = analyze(&params, &c.examples, &opts, &Sequential).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&again).unwrap());
    }
}
