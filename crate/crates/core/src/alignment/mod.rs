//! Word alignments read off encoder-decoder attention.
//!
//! Rows of every alignment matrix index target content tokens `y_1 … y_m`
//! (0-based); columns index source positions including the closing
//! punctuation and `</s>`. Two settings pick which decoder position feeds
//! row `r`:
//!
//! * [`Setting::DecoderOutput`]: the position that *predicts* `y_{r+1}`;
//! * [`Setting::DecoderInput`]: the position that *consumes* `y_{r+1}`.

mod aer;
mod categories;
mod heads;
mod select;

pub use aer::{aer, collapse_gold_to_words, collapse_to_words, corpus_aer, AerCounts, AerResult};
pub use categories::{categorize_error, categorize_errors, ErrorCategory, ErrorCategoryReport};
pub use heads::{
    corpus_head_weights, head_contribution, head_contributions, normalize_contributions, GradientTarget,
    HeadContributions,
};
pub use select::{
    align_example, analyze_corpus, analyze_example, best_head, error_report, hard_alignments, layer_table,
    scoring_pair, select_best_layer, AlignOptions, AnalyzedExample, BestHead, LayerTable, WeightingMode,
};

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::corpus::Link;
use crate::error::{Error, Result};
use crate::model::{argmax, AttentionRecord};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    #[default]
    DecoderOutput,
    DecoderInput,
}

impl Setting {
    /// Decoder position feeding row `r`.
    pub fn position(self, row: usize) -> usize {
        match self {
            Setting::DecoderOutput => row,
            Setting::DecoderInput => row + 1,
        }
    }
}

/// How heads were combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Average,
    /// Per-step contributions, applied row by row.
    HeadImportance,
    /// Contributions averaged over a corpus.
    CorpusHeadImportance,
    SingleHead(usize),
    Custom,
}

/// Head weights handed to [`soft_alignment`].
#[derive(Clone, Debug, PartialEq)]
pub enum HeadWeights {
    Uniform,
    /// One weight vector for every row.
    Fixed(Vec<f64>),
    /// One weight vector per decoder position.
    PerPosition(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub layer: usize,
    pub setting: Setting,
    pub weighting: Weighting,
    /// Weights actually applied: a single vector, or one per row.
    pub head_weights: Vec<Vec<f64>>,
    pub masked: bool,
    /// Rows rescaled to sum to one after masking; for display only.
    pub renormalized: bool,
    /// Rows whose head weights fell back to uniform.
    pub degenerate_rows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftAlignment {
    /// `[target tokens, source positions]`.
    pub matrix: Tensor,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMatrix {
    /// Chosen source column per target row.
    pub columns: Vec<usize>,
    pub source_len: usize,
    pub provenance: Provenance,
}

impl AlignmentMatrix {
    pub fn links(&self) -> BTreeSet<Link> {
        self.columns.iter().enumerate().map(|(t, &j)| Link::new(j, t)).collect()
    }

    /// 0/1 rows with exactly one 1 each.
    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        self.columns
            .iter()
            .map(|&j| {
                let mut row = vec![0u8; self.source_len];
                row[j] = 1;
                row
            })
            .collect()
    }
}

pub fn validate_head_weights(w: &[f64], heads: usize) -> Result<()> {
    if w.len() != heads {
        return Err(Error::InvalidHeadWeights(format!("expected {heads} weights, got {}", w.len())));
    }
    if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::InvalidHeadWeights(format!("weights must be finite and nonnegative: {w:?}")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidHeadWeights(format!("weights sum to {s}, not 1")));
    }
    Ok(())
}

/// Head-weighted encoder-decoder attention of one layer.
pub fn soft_alignment(
    record: &AttentionRecord,
    layer: usize,
    weights: &HeadWeights,
    setting: Setting,
) -> Result<SoftAlignment> {
    let layers = record.layers.len();
    let rec = record.layers.get(layer).ok_or(Error::LayerOutOfRange { layer, layers })?;
    let heads = rec.weights.len();
    let positions = record.decoder_len();
    let cols = record.source_len();
    let rows = positions.saturating_sub(1);
    let uniform = vec![1.0 / heads as f64; heads];
    let (per_row, weighting): (Vec<&[f64]>, Weighting) = match weights {
        HeadWeights::Uniform => ((0..rows).map(|_| uniform.as_slice()).collect(), Weighting::Average),
        HeadWeights::Fixed(w) => {
            validate_head_weights(w, heads)?;
            ((0..rows).map(|_| w.as_slice()).collect(), Weighting::Custom)
        }
        HeadWeights::PerPosition(ws) => {
            if ws.len() != positions {
                return Err(Error::InvalidHeadWeights(format!(
                    "expected weights for {positions} decoder positions, got {}",
                    ws.len()
                )));
            }
            for w in ws {
                validate_head_weights(w, heads)?;
            }
            ((0..rows).map(|r| ws[setting.position(r)].as_slice()).collect(), Weighting::HeadImportance)
        }
    };
    let mut data = vec![0.0; rows * cols];
    for (r, w) in per_row.iter().enumerate() {
        let pos = setting.position(r);
        let out = &mut data[r * cols..(r + 1) * cols];
        for (h, &wh) in w.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(rec.weights[h].row(pos)) {
                *o += wh * a;
            }
        }
    }
    let head_weights = match weights {
        HeadWeights::PerPosition(_) => per_row.iter().map(|w| w.to_vec()).collect(),
        _ => vec![per_row.first().map_or(uniform.clone(), |w| w.to_vec())],
    };
    Ok(SoftAlignment {
        matrix: Tensor::from_op(vec![rows, cols], data),
        provenance: Provenance {
            layer,
            setting,
            weighting,
            head_weights,
            masked: false,
            renormalized: false,
            degenerate_rows: Vec::new(),
        },
    })
}

/// Row-wise argmax; ties go to the lowest column.
pub fn hard_alignment(soft: &SoftAlignment) -> AlignmentMatrix {
    let m = &soft.matrix;
    AlignmentMatrix {
        columns: (0..m.rows()).map(|r| argmax(m.row(r))).collect(),
        source_len: m.cols(),
        provenance: soft.provenance.clone(),
    }
}

/// Zeroes the given source columns without renormalizing.
pub fn mask_finalizing(soft: &SoftAlignment, columns: &[usize]) -> Result<SoftAlignment> {
    let cols = soft.matrix.cols();
    let set: BTreeSet<usize> = columns.iter().copied().collect();
    if set.is_empty() {
        return Err(Error::InvalidMask("no columns to mask".into()));
    }
    if let Some(&c) = set.iter().find(|&&c| c >= cols) {
        return Err(Error::InvalidMask(format!("column {c} out of range for {cols} source positions")));
    }
    if set.len() >= cols {
        return Err(Error::InvalidMask("masking every column leaves no standard token".into()));
    }
    let mut data = soft.matrix.data().to_vec();
    for row in data.chunks_mut(cols) {
        for &c in &set {
            row[c] = 0.0;
        }
    }
    let mut provenance = soft.provenance.clone();
    provenance.masked = true;
    Ok(SoftAlignment { matrix: Tensor::from_op(soft.matrix.shape().to_vec(), data), provenance })
}

impl SoftAlignment {
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.matrix.rows()).map(|r| self.matrix.row(r).iter().sum()).collect()
    }

    /// Rows rescaled to sum to one (all-zero rows stay zero). Display only.
    pub fn renormalized(&self) -> SoftAlignment {
        let cols = self.matrix.cols();
        let mut data = self.matrix.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
        let mut provenance = self.provenance.clone();
        provenance.renormalized = true;
        SoftAlignment { matrix: Tensor::from_op(self.matrix.shape().to_vec(), data), provenance }
    }

    /// Mass each row places on `columns`.
    pub fn mass_on(&self, columns: &[usize]) -> Vec<f64> {
        (0..self.matrix.rows()).map(|r| columns.iter().map(|&c| self.matrix.get2(r, c)).sum()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CrossAttentionRecord;

    /// Record with the given per-head weight rows; one decoder position
    /// beyond the rows so the output setting sees them all.
    pub(crate) fn record(heads: &[Vec<Vec<f64>>]) -> AttentionRecord {
        let weights: Vec<Tensor> = heads.iter().map(|rows| Tensor::from_rows(rows).unwrap()).collect();
        let cols = weights[0].cols();
        let pos = weights[0].rows();
        let layer = CrossAttentionRecord {
            value_norms: heads.iter().map(|_| vec![1.0; cols]).collect(),
            head_outputs: heads.iter().map(|_| Tensor::zeros(&[pos, 1])).collect(),
            merged_output: Tensor::zeros(&[pos, heads.len()]),
            output_norms: vec![0.0; pos],
            weights,
        };
        AttentionRecord { layers: vec![layer], encoder_output: Tensor::zeros(&[cols, 2]) }
    }

    #[test]
    fn single_head_is_its_own_alignment() {
        let rec = record(&[vec![vec![0.7, 0.3], vec![0.1, 0.9]]]);
        let s = soft_alignment(&rec, 0, &HeadWeights::Uniform, Setting::DecoderOutput).unwrap();
        assert_eq!(s.matrix.data(), [0.7, 0.3]);
        let s = soft_alignment(&rec, 0, &HeadWeights::Uniform, Setting::DecoderInput).unwrap();
        assert_eq!(s.matrix.data(), [0.1, 0.9]);
    }

    #[test]
    fn uniform_and_weighted_heads() {
        let rec = record(&[vec![vec![1.0, 0.0], vec![1.0, 0.0]], vec![vec![0.0, 1.0], vec![0.0, 1.0]]]);
        let s = soft_alignment(&rec, 0, &HeadWeights::Uniform, Setting::DecoderOutput).unwrap();
        assert_eq!(s.matrix.data(), [0.5, 0.5]);
        let s = soft_alignment(&rec, 0, &HeadWeights::Fixed(vec![0.25, 0.75]), Setting::DecoderOutput).unwrap();
        assert_eq!(s.matrix.data(), [0.25, 0.75]);
        assert!(soft_alignment(&rec, 0, &HeadWeights::Fixed(vec![0.5, 0.6]), Setting::DecoderOutput).is_err());
        assert!(soft_alignment(&rec, 0, &HeadWeights::Fixed(vec![1.0]), Setting::DecoderOutput).is_err());
        assert!(matches!(
            soft_alignment(&rec, 1, &HeadWeights::Uniform, Setting::DecoderOutput),
            Err(Error::LayerOutOfRange { layer: 1, layers: 1 })
        ));
    }

    #[test]
    fn hard_alignment_examples() {
        let rec = record(&[vec![vec![0.2, 0.5, 0.3], vec![0.5, 0.5, 0.0], vec![0.0; 3]]]);
        let s = soft_alignment(&rec, 0, &HeadWeights::Uniform, Setting::DecoderOutput).unwrap();
        assert_eq!(hard_alignment(&s).columns, [1, 0]);
        let eye = record(&[vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]]);
        let s = soft_alignment(&eye, 0, &HeadWeights::Uniform, Setting::DecoderOutput).unwrap();
        assert_eq!(hard_alignment(&s).to_dense(), [vec![1, 0], vec![0, 1]]);
    }

    #[test]
    fn masking_examples() {
        let rec = record(&[vec![vec![0.6, 0.3, 0.1], vec![0.0, 0.2, 0.8], vec![0.25, 0.35, 0.4], vec![1.0, 0.0, 0.0]]]);
        let s = soft_alignment(&rec, 0, &HeadWeights::Uniform, Setting::DecoderOutput).unwrap();
        let m = mask_finalizing(&s, &[0]).unwrap();
        let h = hard_alignment(&m);
        assert_eq!(h.columns[0], 1);
        assert_eq!(m.matrix.row(1), s.matrix.row(1));
        assert!(m.provenance.masked);
        assert!(m.row_sums().iter().all(|&x| x <= 1.0 + 1e-12));
        // columns 1 and 2 as "." and EOS
        let m = mask_finalizing(&s, &[1, 2]).unwrap();
        assert_eq!(hard_alignment(&m).columns[2], 0);
        assert!(mask_finalizing(&s, &[]).is_err());
        assert!(mask_finalizing(&s, &[0, 1, 2]).is_err());
        assert!(mask_finalizing(&s, &[3]).is_err());
        let r = m.renormalized();
        assert!(r.provenance.renormalized);
        assert!((r.row_sums()[0] - 1.0).abs() < 1e-12);
    }
}
