//! Representation probes over recorded passes.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::alignment::{soft_alignment, HeadWeights, Setting, SoftAlignment};
use crate::corpus::{ParallelExample, PositionTag};
use crate::error::{Error, Result};
use crate::model::AttentionRecord;
use crate::stats::{spearman, Welford};
use crate::tensor::{l2, Tensor};

/// `‖v_j^h‖`, indexed `[layer][head][source position]`.
pub fn value_norms(record: &AttentionRecord) -> Vec<Vec<Vec<f64>>> {
    record.layers.iter().map(|l| l.value_norms.clone()).collect()
}

/// `‖attn_t‖` after the output projection, `[layer][decoder position]`.
pub fn attn_output_norms(record: &AttentionRecord) -> Vec<Vec<f64>> {
    record.layers.iter().map(|l| l.merged_output.row_norms()).collect()
}

/// Source position with the smallest value norm in one head (lowest
/// index on ties).
pub fn min_norm_position(record: &AttentionRecord, layer: usize, head: usize) -> Result<usize> {
    let layers = record.layers.len();
    let l = record.layers.get(layer).ok_or(Error::LayerOutOfRange { layer, layers })?;
    let norms = l.value_norms.get(head).ok_or_else(|| Error::InvalidConfig(alloc::format!("no head {head}")))?;
    let mut best = 0;
    for (j, &n) in norms.iter().enumerate() {
        if n < norms[best] {
            best = j;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MinNormSummary {
    pub layer: usize,
    pub head: usize,
    pub sentences: usize,
    /// Sentences whose smallest-norm source token is finalizing.
    pub finalizing: usize,
}

impl MinNormSummary {
    pub fn share(&self) -> f64 {
        if self.sentences == 0 { 0.0 } else { self.finalizing as f64 / self.sentences as f64 }
    }

    pub fn is_majority(&self) -> bool {
        2 * self.finalizing > self.sentences
    }
}

pub fn min_norm_summary<'a>(
    items: impl IntoIterator<Item = (&'a AttentionRecord, &'a ParallelExample)>,
    layer: usize,
    head: usize,
) -> Result<MinNormSummary> {
    let mut s = MinNormSummary { layer, head, ..MinNormSummary::default() };
    for (record, ex) in items {
        let j = min_norm_position(record, layer, head)?;
        s.sentences += 1;
        if ex.source_tags.get(j).is_some_and(|t| t.finalizing) {
            s.finalizing += 1;
        }
    }
    Ok(s)
}

/// Spearman correlation, pooled over decoder positions, between `‖attn_t‖`
/// of `layer` and the head-averaged attention mass on finalizing tokens.
pub fn output_norm_vs_finalizing_mass<'a>(
    items: impl IntoIterator<Item = (&'a AttentionRecord, &'a ParallelExample)>,
    layer: usize,
) -> Result<Option<f64>> {
    let (mut norms, mut mass) = (Vec::new(), Vec::new());
    for (record, ex) in items {
        let soft = soft_alignment(record, layer, &HeadWeights::Uniform, Setting::DecoderOutput)?;
        let m = soft.mass_on(&ex.finalizing_columns());
        norms.extend_from_slice(&record.layers[layer].output_norms[..m.len()]);
        mass.extend(m);
    }
    Ok(spearman(&norms, &mass))
}

/// Cosine similarity; 0 (and `true`) when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> (f64, bool) {
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        return (0.0, true);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    ((dot / (na * nb)).clamp(-1.0, 1.0), false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineMatrix {
    pub matrix: Tensor,
    /// Rows with zero norm; their cosines are 0.
    pub zero_norm_rows: Vec<usize>,
}

/// Cosine similarity between every pair of encoder outputs.
pub fn encoder_cosine(record: &AttentionRecord) -> CosineMatrix {
    let e = &record.encoder_output;
    let n = e.rows();
    let mut data = vec![0.0; n * n];
    let zero_norm_rows: Vec<usize> = (0..n).filter(|&i| l2(e.row(i)) == 0.0).collect();
    for i in 0..n {
        for j in i..n {
            let c = if i == j && !zero_norm_rows.contains(&i) { 1.0 } else { cosine(e.row(i), e.row(j)).0 };
            data[i * n + j] = c;
            data[j * n + i] = c;
        }
    }
    CosineMatrix { matrix: Tensor::from_op(vec![n, n], data), zero_norm_rows }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairCategory {
    StandardStandard,
    FinalizingStandard,
    FinalizingFinalizing,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

impl From<&Welford> for Summary {
    fn from(w: &Welford) -> Self {
        Summary { count: w.count(), mean: w.mean(), std: libm::sqrt(w.variance()) }
    }
}

/// Mean ± std of off-diagonal encoder cosines by pair category.
pub fn cosine_aggregates<'a>(
    items: impl IntoIterator<Item = (&'a CosineMatrix, &'a [PositionTag])>,
) -> BTreeMap<PairCategory, Summary> {
    let mut acc: BTreeMap<PairCategory, Welford> = BTreeMap::new();
    for (cos, tags) in items {
        let n = cos.matrix.rows();
        for i in 0..n {
            for j in i + 1..n {
                let cat = match (tags[i].finalizing, tags[j].finalizing) {
                    (false, false) => PairCategory::StandardStandard,
                    (true, true) => PairCategory::FinalizingFinalizing,
                    _ => PairCategory::FinalizingStandard,
                };
                acc.entry(cat).or_default().push(cos.matrix.get2(i, j));
            }
        }
    }
    acc.iter().map(|(k, w)| (*k, Summary::from(w))).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RateEntry {
    pub tokens: usize,
    pub above: usize,
    pub rate: f64,
}

/// For each target-token label, the share of tokens whose soft alignment
/// puts more than `threshold` of its mass on finalizing source columns.
pub fn finalizing_attention_rate<'a>(
    items: impl IntoIterator<Item = (&'a SoftAlignment, &'a ParallelExample)>,
    threshold: f64,
) -> Result<BTreeMap<String, RateEntry>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidConfig(alloc::format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let mut table: BTreeMap<String, RateEntry> = BTreeMap::new();
    for (soft, ex) in items {
        let mass = soft.mass_on(&ex.finalizing_columns());
        for (tag, m) in ex.target_tags.iter().zip(mass) {
            let e = table.entry(String::from(tag.label())).or_default();
            e.tokens += 1;
            if m > threshold {
                e.above += 1;
            }
        }
    }
    for e in table.values_mut() {
        e.rate = e.above as f64 / e.tokens as f64;
    }
    Ok(table)
}

/// Probe outputs for one sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub value_norms: Vec<Vec<Vec<f64>>>,
    pub attn_output_norms: Vec<Vec<f64>>,
    pub encoder_cosine: CosineMatrix,
}

pub fn probe(record: &AttentionRecord) -> ProbeReport {
    ProbeReport {
        value_norms: value_norms(record),
        attn_output_norms: attn_output_norms(record),
        encoder_cosine: encoder_cosine(record),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).0 - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).0, 0.0);
        assert!((cosine(&[1.0, 2.0], &[-2.0, -4.0]).0 + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), (0.0, true));
    }

    #[test]
    fn norms_of_simple_vectors() {
        assert_eq!(l2(&[0.0, 0.0]), 0.0);
        assert_eq!(l2(&[0.6, 0.8]), 1.0);
    }
}
