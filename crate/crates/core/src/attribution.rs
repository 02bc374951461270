//! Source and target-prefix attributions under teacher forcing.
//!
//! Contributions are variances of the reference-token probability when
//! the token embeddings of one side are perturbed with Gaussian noise of
//! standard deviation `λ·‖e‖`. Saliencies are mean gradient norms of that
//! probability over noisy samples. Noise touches the raw token embedding;
//! scaling and positional encodings are applied afterwards.

use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignment::SoftAlignment;
use crate::corpus::ParallelExample;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::model::{embedding_rows, ModelParams, PassOptions, TracedPass};
use crate::seed::derive_seed;
use crate::stats::Welford;
use crate::tensor::{l2, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    /// Noise standard deviation relative to each embedding's norm.
    pub lambda: f64,
    /// Number of noisy samples `N`.
    pub samples: usize,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig { lambda: 0.01, samples: 30, seed: 0 }
    }
}

impl PerturbationConfig {
    /// Requirements of the variance estimators: `λ > 0`, `N ≥ 2`.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.samples < 2 {
            return Err(Error::TooFewSamples { samples: self.samples });
        }
        Ok(())
    }

    /// Requirements of the saliency estimators: `λ ≥ 0`, `N ≥ 1`.
    pub fn validate_saliency(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.samples == 0 {
            return Err(Error::TooFewSamples { samples: 0 });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Source,
    Target,
}

impl Side {
    fn tag(self) -> u64 {
        match self {
            Side::Source => 11,
            Side::Target => 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbed {
    pub embeddings: Tensor,
    /// Rows with zero norm, left unchanged.
    pub zero_norm_rows: Vec<usize>,
}

/// `σ = ‖e‖·λ`.
pub fn noise_scale(embedding: &[f64], lambda: f64) -> f64 {
    l2(embedding) * lambda
}

/// Adds i.i.d. `N(0, σ_j²)` noise to every coordinate of row `j`.
pub fn perturb_embeddings<R: Rng>(embeddings: &Tensor, lambda: f64, rng: &mut R) -> Perturbed {
    let d = embeddings.cols();
    let mut data = embeddings.data().to_vec();
    let mut zero_norm_rows = Vec::new();
    for (j, row) in data.chunks_mut(d.max(1)).enumerate() {
        let sigma = noise_scale(row, lambda);
        if sigma == 0.0 {
            if l2(row) == 0.0 {
                zero_norm_rows.push(j);
            }
            continue;
        }
        for x in row.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x += sigma * z;
        }
    }
    Perturbed { embeddings: Tensor::from_op(embeddings.shape().to_vec(), data), zero_norm_rows }
}

/// Noise of sample `n` on one side, seeded from `(seed, side, n)`.
pub fn perturb_sample(embeddings: &Tensor, config: &PerturbationConfig, side: Side, n: usize) -> Perturbed {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, side.tag(), n as u64]));
    perturb_embeddings(embeddings, config.lambda, &mut rng)
}

/// Clean embeddings of the source and of the decoder inputs.
fn clean_embeddings(params: &ModelParams, example: &ParallelExample) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let tgt = example.framed_target(params.config.eos_id);
    let src = embedding_rows(&params.weights.src_embed, &example.source)?;
    let prefix = embedding_rows(&params.weights.tgt_embed, &tgt[..tgt.len() - 1])?;
    Ok((src, prefix, tgt))
}

fn reference_probabilities(
    params: &ModelParams,
    example: &ParallelExample,
    tgt: &[usize],
    src: Tensor,
    prefix: Tensor,
) -> Result<Vec<f64>> {
    let opts = PassOptions { src_embeddings: Some(src), tgt_embeddings: Some(prefix), ..PassOptions::default() };
    let mut pass = TracedPass::run(params, &example.source, tgt, opts)?;
    let lp = pass.reference_log_probs();
    pass.tape.check_finite(lp)?;
    Ok(pass.tape.value(lp).data().iter().map(|&x| libm::exp(x)).collect())
}

/// `P(y_t | ŷ_<t, x̂)` for every sample (rows) and step (columns), with
/// only `side` perturbed. `positions` restricts which rows of that side
/// receive noise (all when `None`).
pub fn sample_probabilities<E: Executor>(
    params: &ModelParams,
    example: &ParallelExample,
    side: Side,
    config: &PerturbationConfig,
    positions: Option<&[usize]>,
    exec: &E,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let (src, prefix, tgt) = clean_embeddings(params, example)?;
    let samples: Vec<usize> = (0..config.samples).collect();
    let results = exec.map(samples, |n| -> Result<(Vec<f64>, Vec<usize>)> {
        let clean = match side {
            Side::Source => &src,
            Side::Target => &prefix,
        };
        let mut noisy = perturb_sample(clean, config, side, n);
        if let Some(keep) = positions {
            // restore rows outside the requested positions
            let d = clean.cols();
            let mut data = noisy.embeddings.into_data();
            for j in (0..clean.rows()).filter(|j| !keep.contains(j)) {
                data[j * d..(j + 1) * d].copy_from_slice(clean.row(j));
            }
            noisy.embeddings = Tensor::from_op(clean.shape().to_vec(), data);
            noisy.zero_norm_rows.retain(|j| keep.contains(j));
        }
        let (s, p) = match side {
            Side::Source => (noisy.embeddings, prefix.clone()),
            Side::Target => (src.clone(), noisy.embeddings),
        };
        Ok((reference_probabilities(params, example, &tgt, s, p)?, noisy.zero_norm_rows))
    });
    let mut probs = Vec::with_capacity(config.samples);
    let mut zero = Vec::new();
    for r in results {
        let (p, z) = r?;
        for j in z {
            if !zero.contains(&j) {
                zero.push(j);
            }
        }
        probs.push(p);
    }
    zero.sort_unstable();
    Ok((probs, zero))
}

/// Population variance (`1/N`) of each column of `samples`.
pub fn column_variances(samples: &[Vec<f64>]) -> Vec<f64> {
    let steps = samples.first().map_or(0, |s| s.len());
    (0..steps)
        .map(|t| {
            let mut w = Welford::new();
            w.extend(samples.iter().map(|s| s[t]));
            w.variance()
        })
        .collect()
}

fn step_index(example: &ParallelExample, t: usize) -> Result<usize> {
    let steps = example.target.len() + 1;
    if t == 0 || t > steps {
        return Err(Error::InvalidConfig(alloc::format!("step {t} outside 1..={steps}")));
    }
    Ok(t - 1)
}

/// `C_S(y_t)` for every step `t = 1 … |y|−1`.
pub fn source_contributions<E: Executor>(
    params: &ModelParams,
    example: &ParallelExample,
    config: &PerturbationConfig,
    exec: &E,
) -> Result<Vec<f64>> {
    config.validate()?;
    Ok(column_variances(&sample_probabilities(params, example, Side::Source, config, None, exec)?.0))
}

/// `C_T(y_t)` for every step. One noisy prefix per sample serves all
/// steps: step `t` only sees positions `< t`.
pub fn target_contributions<E: Executor>(
    params: &ModelParams,
    example: &ParallelExample,
    config: &PerturbationConfig,
    exec: &E,
) -> Result<Vec<f64>> {
    config.validate()?;
    Ok(column_variances(&sample_probabilities(params, example, Side::Target, config, None, exec)?.0))
}

/// `C_S(y_t)` for one step `t ≥ 1`.
pub fn source_contribution<E: Executor>(
    params: &ModelParams,
    example: &ParallelExample,
    t: usize,
    config: &PerturbationConfig,
    exec: &E,
) -> Result<f64> {
    let k = step_index(example, t)?;
    Ok(source_contributions(params, example, config, exec)?[k])
}

/// `C_T(y_t)` for one step `t ≥ 1`, perturbing only the prefix `y_<t`.
pub fn target_contribution<E: Executor>(
    params: &ModelParams,
    example: &ParallelExample,
    t: usize,
    config: &PerturbationConfig,
    exec: &E,
) -> Result<f64> {
    config.validate()?;
    let k = step_index(example, t)?;
    let prefix: Vec<usize> = (0..t).collect();
    let (samples, _) = sample_probabilities(params, example, Side::Target, config, Some(&prefix), exec)?;
    Ok(column_variances(&samples)[k])
}

/// Mean gradient norms of `P(y_t | …)` with respect to the embeddings of
/// `side`, one noisy sample of that side per draw. Rows index embedding
/// positions, columns framed target positions; column 0 is zero.
fn saliency<E: Executor>(
    params: &ModelParams,
    example: &ParallelExample,
    side: Side,
    config: &PerturbationConfig,
    exec: &E,
) -> Result<Tensor> {
    config.validate_saliency()?;
    let (src, prefix, tgt) = clean_embeddings(params, example)?;
    let len = tgt.len();
    let rows = match side {
        Side::Source => src.rows(),
        Side::Target => len,
    };
    let samples: Vec<usize> = (0..config.samples).collect();
    let results = exec.map(samples, |n| -> Result<Vec<f64>> {
        let (s, p) = match side {
            Side::Source => (perturb_sample(&src, config, side, n).embeddings, prefix.clone()),
            Side::Target => (src.clone(), perturb_sample(&prefix, config, side, n).embeddings),
        };
        let opts = PassOptions {
            embeddings_require_grad: true,
            src_embeddings: Some(s),
            tgt_embeddings: Some(p),
            ..PassOptions::default()
        };
        let mut pass = TracedPass::run(params, &example.source, &tgt, opts)?;
        let lp = pass.reference_log_probs();
        pass.tape.check_finite(lp)?;
        let lpv = pass.tape.value(lp).data().to_vec();
        let leaf = match side {
            Side::Source => pass.src_embed,
            Side::Target => pass.tgt_embed,
        };
        let mut out = vec![0.0; rows * len];
        for k in 0..lpv.len() {
            let t = k + 1;
            let mut seed = vec![0.0; lpv.len()];
            seed[k] = libm::exp(lpv[k]);
            let g = pass.tape.backward(lp, &Tensor::vector(seed)?)?;
            if let Some(grad) = g.get(leaf) {
                let norms = grad.row_norms();
                let limit = match side {
                    Side::Source => norms.len(),
                    Side::Target => t,
                };
                for (i, &v) in norms.iter().enumerate().take(limit) {
                    out[i * len + t] = v;
                }
            }
        }
        Ok(out)
    });
    let mut acc = vec![0.0; rows * len];
    for r in results {
        for (a, v) in acc.iter_mut().zip(r?) {
            *a += v;
        }
    }
    let n = config.samples as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(Tensor::from_op(vec![rows, len], acc))
}

/// `ψ(y_i, y_t)` over the framed target, `[|y|, |y|]`; zero for `i ≥ t`.
pub fn prefix_saliency<E: Executor>(
    params: &ModelParams,
    example: &ParallelExample,
    config: &PerturbationConfig,
    exec: &E,
) -> Result<Tensor> {
    saliency(params, example, Side::Target, config, exec)
}

/// Source saliency, `[|x|, |y|]`.
pub fn source_saliency<E: Executor>(
    params: &ModelParams,
    example: &ParallelExample,
    config: &PerturbationConfig,
    exec: &E,
) -> Result<Tensor> {
    saliency(params, example, Side::Source, config, exec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub config: PerturbationConfig,
    /// `C_S(y_t)` for `t = 1 … |y|−1`.
    pub source_contribution: Vec<f64>,
    /// `C_T(y_t)` for the same steps.
    pub target_contribution: Vec<f64>,
    /// Steps whose prefix is only the leading `</s>`.
    pub sentinel_only_steps: Vec<usize>,
    pub psi: Option<Tensor>,
    pub source_saliency: Option<Tensor>,
    pub zero_norm_source_rows: Vec<usize>,
    pub zero_norm_target_rows: Vec<usize>,
}

impl AttributionReport {
    /// `C_T / (C_S + C_T)` per step; `None` where both are zero.
    pub fn target_shares(&self) -> Vec<Option<f64>> {
        self.source_contribution
            .iter()
            .zip(&self.target_contribution)
            .map(|(&s, &t)| if s + t > 0.0 { Some(t / (s + t)) } else { None })
            .collect()
    }
}

/// `(finalizing attention mass, C_T / (C_S + C_T))` for every target token
/// of one sentence, skipping steps where both contributions vanish.
/// `soft` must use the decoder-output setting.
pub fn finalizing_mass_and_target_share(
    soft: &SoftAlignment,
    report: &AttributionReport,
    example: &ParallelExample,
) -> Vec<(f64, f64)> {
    soft.mass_on(&example.finalizing_columns())
        .into_iter()
        .zip(report.target_shares())
        .filter_map(|(m, s)| s.map(|s| (m, s)))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionParts {
    pub psi: bool,
    pub source_saliency: bool,
}

pub fn attribute<E: Executor>(
    params: &ModelParams,
    example: &ParallelExample,
    config: &PerturbationConfig,
    parts: AttributionParts,
    exec: &E,
) -> Result<AttributionReport> {
    config.validate()?;
    let (s, zs) = sample_probabilities(params, example, Side::Source, config, None, exec)?;
    let (t, zt) = sample_probabilities(params, example, Side::Target, config, None, exec)?;
    Ok(AttributionReport {
        config: *config,
        source_contribution: column_variances(&s),
        target_contribution: column_variances(&t),
        sentinel_only_steps: vec![1],
        psi: if parts.psi { Some(prefix_saliency(params, example, config, exec)?) } else { None },
        source_saliency: if parts.source_saliency { Some(source_saliency(params, example, config, exec)?) } else { None },
        zero_norm_source_rows: zs,
        zero_norm_target_rows: zt,
    })
}
