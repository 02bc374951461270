//! Teacher-forced maximum-likelihood training with Adam.

use alloc::format;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelExample;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::model::{DropoutSpec, ModelConfig, ModelParams, PassOptions, TracedPass};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub warmup_steps: u64,
    /// Sentences per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub dropout: f64,
    /// The last `dev_size` sentences form the development set. With 0 the
    /// training sentences double as the development set.
    pub dev_size: usize,
    pub seed: u64,
    /// Stop after the first epoch whose dev token accuracy reaches this.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            warmup_steps: 200,
            batch_size: 16,
            max_epochs: 10,
            clip_norm: 1.0,
            dropout: 0.1,
            dev_size: 500,
            seed: 0,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, corpus_len: usize) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0 && self.clip_norm > 0.0) {
            return bad(format!(
                "learning_rate, epsilon and clip_norm must be positive (got {}, {}, {})",
                self.learning_rate, self.epsilon, self.clip_norm
            ));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if corpus_len == 0 {
            return bad("corpus is empty".into());
        }
        if self.dev_size >= corpus_len {
            return bad(format!("dev split {} must be smaller than the corpus ({corpus_len})", self.dev_size));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then `peak·√(warmup/step)`.
/// Steps count from 1.
pub fn inverse_sqrt_lr(peak: f64, warmup: u64, step: u64) -> f64 {
    let step = step.max(1) as f64;
    if warmup == 0 {
        return peak / libm::sqrt(step);
    }
    let w = warmup as f64;
    if step < w {
        peak * step / w
    } else {
        peak * libm::sqrt(w / step)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// First and second moments in parameter visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::ShapeMismatch {
            context: "adam_step",
            detail: format!("{n} params, {} grads, {} moments", grads.len(), state.m.len()),
        });
    }
    for i in 0..n {
        if params[i].shape() != grads[i].shape() || state.m[i].shape() != grads[i].shape() {
            return Err(Error::ShapeMismatch {
                context: "adam_step",
                detail: format!("tensor {i}: param {:?}, grad {:?}", params[i].shape(), grads[i].shape()),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(hyper.beta1, t as f64);
    let c2 = 1.0 - libm::pow(hyper.beta2, t as f64);
    for i in 0..n {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params[i].data_mut();
        for k in 0..g.len() {
            m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g[k];
            v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= hyper.learning_rate * m_hat / (libm::sqrt(v_hat) + hyper.epsilon);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum());
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= f;
            }
        }
    }
    norm
}

/// Summed token loss and parameter gradients of one sentence.
#[derive(Clone, Debug)]
pub struct SentenceGradient {
    pub loss: f64,
    pub tokens: usize,
    pub correct: usize,
    pub grads: Vec<Tensor>,
}

pub fn sentence_gradient(
    params: &ModelParams,
    example: &ParallelExample,
    dropout: Option<DropoutSpec>,
) -> Result<SentenceGradient> {
    let tgt = example.framed_target(params.config.eos_id);
    let opts = PassOptions { params_require_grad: true, dropout, ..PassOptions::default() };
    let mut pass = TracedPass::run(params, &example.source, &tgt, opts)?;
    let loss = pass.tape.cross_entropy(pass.logits, &pass.targets.clone());
    pass.tape.check_finite(loss)?;
    let correct = pass.predictions().iter().zip(&pass.targets).filter(|(p, t)| p == t).count();
    let g = pass.tape.backward_scalar(loss)?;
    let mut leaves = Vec::new();
    pass.weights.visit(&mut leaves);
    let grads = leaves.iter().map(|(_, &v)| g.get_or_zeros(&pass.tape, v)).collect();
    Ok(SentenceGradient { loss: pass.tape.value(loss).data()[0], tokens: pass.targets.len(), correct, grads })
}

/// Mean token loss over `batch` and its gradient, reduced in batch order.
pub fn batch_gradient<E: Executor>(
    params: &ModelParams,
    batch: &[&ParallelExample],
    dropout: impl Fn(usize) -> Option<DropoutSpec> + Sync + Send,
    exec: &E,
) -> Result<SentenceGradient> {
    let items: Vec<(usize, &ParallelExample)> = batch.iter().copied().enumerate().collect();
    let results = exec.map(items, |(i, ex)| sentence_gradient(params, ex, dropout(i)));
    let mut total: Option<SentenceGradient> = None;
    for r in results {
        let r = r?;
        match &mut total {
            None => total = Some(r),
            Some(acc) => {
                acc.loss += r.loss;
                acc.tokens += r.tokens;
                acc.correct += r.correct;
                for (a, g) in acc.grads.iter_mut().zip(&r.grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut total = total.ok_or(Error::InvalidConfig("empty batch".into()))?;
    let scale = 1.0 / total.tokens as f64;
    total.loss *= scale;
    for g in &mut total.grads {
        for x in g.data_mut() {
            *x *= scale;
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    /// Mean negative log-likelihood per target token, in nats.
    pub cross_entropy: f64,
    pub token_accuracy: f64,
    pub tokens: usize,
}

/// Dropout-free teacher-forced evaluation.
pub fn evaluate<E: Executor>(params: &ModelParams, examples: &[ParallelExample], exec: &E) -> Result<DevMetrics> {
    let items: Vec<&ParallelExample> = examples.iter().collect();
    let results = exec.map(items, |ex| -> Result<(f64, usize, usize)> {
        let tgt = ex.framed_target(params.config.eos_id);
        let mut pass = TracedPass::run(params, &ex.source, &tgt, PassOptions::default())?;
        let targets = pass.targets.clone();
        let loss = pass.tape.cross_entropy(pass.logits, &targets);
        pass.tape.check_finite(loss)?;
        let correct = pass.predictions().iter().zip(&targets).filter(|(p, t)| p == t).count();
        Ok((pass.tape.value(loss).data()[0], targets.len(), correct))
    });
    let (mut loss, mut tokens, mut correct) = (0.0, 0, 0);
    for r in results {
        let (l, t, c) = r?;
        loss += l;
        tokens += t;
        correct += c;
    }
    let denom = tokens.max(1) as f64;
    Ok(DevMetrics { cross_entropy: loss / denom, token_accuracy: correct as f64 / denom, tokens })
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: u64,
    pub sentences_seen: u64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub dev_cross_entropy: f64,
    pub dev_token_accuracy: f64,
    pub learning_rate: f64,
    /// Dev cross-entropy is the lowest so far.
    pub best: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: ModelParams,
    pub best: ModelParams,
    pub optimizer: AdamState,
    pub log: Vec<EpochMetrics>,
}

/// A failed run keeps the parameters from before the failing step.
#[derive(Clone, Debug)]
pub struct TrainFailure {
    pub error: Error,
    /// `None` when the run failed before any parameters existed.
    pub last_good: Option<ModelParams>,
    pub log: Vec<EpochMetrics>,
}

/// Splits off the development set: the last `dev_size` sentences.
pub fn split_dev(corpus: &[ParallelExample], dev_size: usize) -> (&[ParallelExample], &[ParallelExample]) {
    if dev_size == 0 {
        (corpus, corpus)
    } else {
        corpus.split_at(corpus.len() - dev_size)
    }
}

const SHUFFLE: u64 = 1;
const DROPOUT: u64 = 2;
const INIT: u64 = 3;

/// Trains a fresh model. `on_epoch` sees every log line with the current
/// parameters and may stop the run.
pub fn train<E, F>(
    model: ModelConfig,
    config: &TrainConfig,
    corpus: &[ParallelExample],
    exec: &E,
    on_epoch: F,
) -> core::result::Result<TrainOutcome, TrainFailure>
where
    E: Executor,
    F: FnMut(&EpochMetrics, &ModelParams, &AdamState) -> Control,
{
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, INIT]));
    let model = ModelConfig { dropout: config.dropout, ..model };
    let params = config
        .validate(corpus.len())
        .and_then(|_| ModelParams::init(model, &mut init_rng))
        .map_err(|error| TrainFailure { error, last_good: None, log: Vec::new() })?;
    resume(params, None, config, corpus, exec, on_epoch)
}

/// Continues training from `params` (and optimizer state when given).
pub fn resume<E, F>(
    mut params: ModelParams,
    optimizer: Option<AdamState>,
    config: &TrainConfig,
    corpus: &[ParallelExample],
    exec: &E,
    mut on_epoch: F,
) -> core::result::Result<TrainOutcome, TrainFailure>
where
    E: Executor,
    F: FnMut(&EpochMetrics, &ModelParams, &AdamState) -> Control,
{
    let mut log = Vec::new();
    if let Err(error) = config.validate(corpus.len()) {
        return Err(TrainFailure { error, last_good: Some(params), log });
    }
    let (train_set, dev_set) = split_dev(corpus, config.dev_size);
    let mut state = optimizer.unwrap_or_else(|| AdamState::new(&params));
    let mut best = params.clone();
    let mut best_ce = f64::INFINITY;
    let mut sentences_seen = 0u64;
    let dropout_rate = config.dropout;
    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, SHUFFLE, epoch as u64])));
        let (mut loss_sum, mut tokens, mut correct) = (0.0, 0usize, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ParallelExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let step = state.step + 1;
            let seed = config.seed;
            let dropout = |i: usize| {
                (dropout_rate > 0.0)
                    .then(|| DropoutSpec { rate: dropout_rate, seed: derive_seed(&[seed, DROPOUT, step, i as u64]) })
            };
            let diverged = || Error::Diverged { epoch, step };
            let mut g = match batch_gradient(&params, &batch, dropout, exec) {
                Ok(g) if g.loss.is_finite() => g,
                Ok(_) => return Err(TrainFailure { error: diverged(), last_good: Some(params), log }),
                Err(Error::NonFinite { .. }) => {
                    return Err(TrainFailure { error: diverged(), last_good: Some(params), log });
                }
                Err(error) => return Err(TrainFailure { error, last_good: Some(params), log }),
            };
            loss_sum += g.loss * g.tokens as f64;
            tokens += g.tokens;
            correct += g.correct;
            clip_global_norm(&mut g.grads, config.clip_norm);
            lr = inverse_sqrt_lr(config.learning_rate, config.warmup_steps, step);
            let hyper = AdamHyper { learning_rate: lr, ..config.adam() };
            let before = params.clone();
            let mut slots: Vec<&mut Tensor> = params.weights.named_mut().into_iter().map(|(_, t)| t).collect();
            if let Err(error) = adam_step(&mut slots, &g.grads, &mut state, &hyper) {
                return Err(TrainFailure { error, last_good: Some(before), log });
            }
            if params.named().iter().any(|(_, t)| !t.is_finite()) {
                return Err(TrainFailure { error: diverged(), last_good: Some(before), log });
            }
            sentences_seen += batch.len() as u64;
        }
        let dev = match evaluate(&params, dev_set, exec) {
            Ok(d) => d,
            Err(Error::NonFinite { .. }) => {
                return Err(TrainFailure { error: Error::Diverged { epoch, step: state.step }, last_good: Some(best), log });
            }
            Err(error) => return Err(TrainFailure { error, last_good: Some(params), log }),
        };
        let is_best = dev.cross_entropy < best_ce;
        if is_best {
            best_ce = dev.cross_entropy;
            best = params.clone();
        }
        let denom = tokens.max(1) as f64;
        let metrics = EpochMetrics {
            epoch,
            steps: state.step,
            sentences_seen,
            train_loss: loss_sum / denom,
            train_accuracy: correct as f64 / denom,
            dev_cross_entropy: dev.cross_entropy,
            dev_token_accuracy: dev.token_accuracy,
            learning_rate: lr,
            best: is_best,
        };
        log.push(metrics.clone());
        let control = on_epoch(&metrics, &params, &state);
        let reached = config.target_accuracy.is_some_and(|a| dev.token_accuracy >= a);
        if control == Control::Stop || reached {
            break;
        }
    }
    Ok(TrainOutcome { last: params, best, optimizer: state, log })
}
