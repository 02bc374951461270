//! Head importance: how strongly the probability of each target token
//! reacts to each head's value vectors.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelExample;
use crate::error::{Error, Result};
use crate::model::{embedding_rows, ModelParams, PassOptions, TracedPass};
use crate::tape::{Gradients, Var};
use crate::tensor::Tensor;

/// Which token's probability is differentiated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientTarget {
    /// The reference token under teacher forcing.
    #[default]
    Reference,
    /// The model's own argmax prediction.
    Predicted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadContributions {
    /// `c_h = Σ_j ‖∂P/∂v_j^h‖`, indexed `[layer][decoder position][head]`.
    pub raw: Vec<Vec<Vec<f64>>>,
    /// `raw` normalized to sum to one per position.
    pub normalized: Vec<Vec<Vec<f64>>>,
    /// `(layer, position)` pairs whose contributions were all zero and
    /// fell back to uniform weights.
    pub degenerate: Vec<(usize, usize)>,
}

/// `C_h = c_h / Σ c_h`; uniform (and `true`) when every `c_h` is zero.
pub fn normalize_contributions(raw: &[f64]) -> (Vec<f64>, bool) {
    let s: f64 = raw.iter().sum();
    if s > 0.0 && s.is_finite() {
        (raw.iter().map(|c| c / s).collect(), false)
    } else {
        (vec![1.0 / raw.len() as f64; raw.len()], true)
    }
}

struct Prepared<'a> {
    pass: TracedPass<'a>,
    log_probs: Var,
    values: Vec<f64>,
}

fn prepare<'a>(params: &'a ModelParams, example: &ParallelExample, target: GradientTarget) -> Result<Prepared<'a>> {
    let tgt = example.framed_target(params.config.eos_id);
    // source embeddings as gradient leaves so every value vector is tracked
    let opts = PassOptions {
        embeddings_require_grad: true,
        src_embeddings: Some(embedding_rows(&params.weights.src_embed, &example.source)?),
        ..PassOptions::default()
    };
    let mut pass = TracedPass::run(params, &example.source, &tgt, opts)?;
    let log_probs = match target {
        GradientTarget::Reference => pass.reference_log_probs(),
        GradientTarget::Predicted => {
            let predicted = pass.predictions();
            let lp = pass.tape.log_softmax(pass.logits);
            pass.tape.pick(lp, &predicted)
        }
    };
    pass.tape.check_finite(log_probs)?;
    let values = pass.tape.value(log_probs).data().to_vec();
    Ok(Prepared { pass, log_probs, values })
}

/// Gradients of `P(y_{pos+1} | …)` from a prepared pass.
fn probability_gradients(p: &Prepared<'_>, pos: usize) -> Result<Gradients> {
    let mut seed = vec![0.0; p.values.len()];
    // dP/dlogP = P
    seed[pos] = libm::exp(p.values[pos]);
    p.pass.tape.backward(p.log_probs, &Tensor::vector(seed)?)
}

fn raw_at(p: &Prepared<'_>, g: &Gradients) -> Vec<Vec<f64>> {
    p.pass
        .cross
        .iter()
        .map(|c| c.values.iter().map(|&v| g.get(v).map_or(0.0, |t| t.row_norms().iter().sum())).collect())
        .collect()
}

/// Contributions at every decoder position of every layer.
pub fn head_contributions(
    params: &ModelParams,
    example: &ParallelExample,
    target: GradientTarget,
) -> Result<HeadContributions> {
    let p = prepare(params, example, target)?;
    let layers = p.pass.cross.len();
    let positions = p.values.len();
    let mut raw = vec![Vec::with_capacity(positions); layers];
    for pos in 0..positions {
        let g = probability_gradients(&p, pos)?;
        for (l, c) in raw_at(&p, &g).into_iter().enumerate() {
            raw[l].push(c);
        }
    }
    let mut degenerate = Vec::new();
    let normalized = raw
        .iter()
        .enumerate()
        .map(|(l, per_pos)| {
            per_pos
                .iter()
                .enumerate()
                .map(|(pos, c)| {
                    let (w, flag) = normalize_contributions(c);
                    if flag {
                        degenerate.push((l, pos));
                    }
                    w
                })
                .collect()
        })
        .collect();
    Ok(HeadContributions { raw, normalized, degenerate })
}

/// Normalized contributions of every layer's heads for the token predicted
/// at decoder position `pos`.
pub fn head_contribution(params: &ModelParams, example: &ParallelExample, pos: usize) -> Result<Vec<Vec<f64>>> {
    let p = prepare(params, example, GradientTarget::Reference)?;
    if pos >= p.values.len() {
        return Err(Error::InvalidConfig(alloc::format!(
            "decoder position {pos} out of range ({} positions)",
            p.values.len()
        )));
    }
    let g = probability_gradients(&p, pos)?;
    Ok(raw_at(&p, &g).iter().map(|c| normalize_contributions(c).0).collect())
}

/// Per-layer head weights averaged over every position of every example.
pub fn corpus_head_weights(contributions: &[&HeadContributions]) -> Vec<Vec<f64>> {
    let Some(first) = contributions.first() else { return Vec::new() };
    let layers = first.normalized.len();
    let heads = first.normalized.first().and_then(|l| l.first()).map_or(0, |h| h.len());
    let mut sums = vec![vec![0.0; heads]; layers];
    let mut count = 0usize;
    for c in contributions {
        for (l, per_pos) in c.normalized.iter().enumerate() {
            for w in per_pos {
                for (s, x) in sums[l].iter_mut().zip(w) {
                    *s += x;
                }
            }
        }
        count += c.normalized.first().map_or(0, |l| l.len());
    }
    sums.into_iter()
        .map(|s| {
            if count == 0 {
                vec![1.0 / heads as f64; heads]
            } else {
                let total: f64 = s.iter().sum();
                s.iter().map(|x| x / total).collect()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_contributions(&[2.5]), (vec![1.0], false));
        assert_eq!(normalize_contributions(&[1.0, 3.0]), (vec![0.25, 0.75], false));
        assert_eq!(normalize_contributions(&[0.0, 0.0]), (vec![0.5, 0.5], true));
    }
}
