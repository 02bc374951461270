use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use crate::tensor::{gemm, Tensor};

/// Encoder-decoder attention internals of one decoder layer.
///
/// Row `t` of every per-step quantity is decoder position `t`, i.e. the
/// step that consumes `y_t` and predicts `y_{t+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionRecord {
    /// Per head, `[decoder positions, source positions]`; rows are
    /// probability distributions.
    pub weights: Vec<Tensor>,
    /// Per head, `‖v_j‖` for every source position `j`.
    pub value_norms: Vec<Vec<f64>>,
    /// Per head, `z_t = Σ_j α_tj v_j`, `[decoder positions, d_k]`.
    pub head_outputs: Vec<Tensor>,
    /// Heads concatenated and projected by the output weights, bias
    /// included: the vector added to the residual stream.
    pub merged_output: Tensor,
    /// `‖attn_t‖` per decoder position.
    pub output_norms: Vec<f64>,
}

/// Everything captured by value during one teacher-forced pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layers: Vec<CrossAttentionRecord>,
    /// Final encoder states `e_j`, after the encoder's closing layer norm.
    pub encoder_output: Tensor,
}

impl AttentionRecord {
    pub fn heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weights.len())
    }

    pub fn source_len(&self) -> usize {
        self.encoder_output.rows()
    }

    /// Number of decoder positions (framed target length minus one).
    pub fn decoder_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weights[0].rows())
    }

    /// Largest absolute gap between the recorded merged output and the
    /// heads re-concatenated and projected through `params`.
    pub fn reconstruction_error(&self, params: &ModelParams) -> f64 {
        let mut worst = 0.0f64;
        for (layer, rec) in params.weights.decoder.iter().zip(&self.layers) {
            let rows = rec.merged_output.rows();
            let dk = rec.head_outputs[0].cols();
            let d = dk * rec.head_outputs.len();
            let mut concat = alloc::vec![0.0; rows * d];
            for (h, z) in rec.head_outputs.iter().enumerate() {
                for r in 0..rows {
                    concat[r * d + h * dk..r * d + (h + 1) * dk].copy_from_slice(z.row(r));
                }
            }
            let w = &layer.cross_attn.output;
            let mut out = alloc::vec![0.0; rows * d];
            gemm(rows, d, d, &concat, false, w.weight.data(), false, &mut out, false);
            for r in 0..rows {
                for c in 0..d {
                    let v = out[r * d + c] + w.bias.data()[c];
                    worst = worst.max((v - rec.merged_output.get2(r, c)).abs());
                }
            }
        }
        worst
    }
}
