//! Instrumented forward passes.
//!
//! Source tokens are embedded as `√d · E[x_j] + PE(j)`; the same holds on
//! the target side. Every layer is pre-norm. In each decoder layer the
//! encoder-decoder attention output is added straight onto the running
//! target representation, and its internals (weights, value vectors, head
//! outputs, merged output) stay addressable as tape nodes so callers can
//! differentiate with respect to them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::params::{Attention, FeedForward, LayerNorm, Linear, ModelParams, Weights};
use super::record::{AttentionRecord, CrossAttentionRecord};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fixed sinusoidal position table, `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let rate = libm::pow(10000.0, i as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = libm::sin(angle);
            if i + 1 < d {
                data[pos * d + i + 1] = libm::cos(angle);
            }
        }
    }
    Tensor::from_op(vec![len, d], data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
    pub seed: u64,
}

struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Var {
        let keep = 1.0 - self.rate;
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.mul_const(x, mask)
    }
}

fn maybe_drop(tape: &mut Tape<'_>, dropout: &mut Option<Dropout>, x: Var) -> Var {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => x,
    }
}

/// How to set up a traced pass.
#[derive(Clone, Debug, Default)]
pub struct PassOptions {
    /// Make every parameter a gradient target (training).
    pub params_require_grad: bool,
    /// Make the token-embedding inputs gradient targets (saliency).
    pub embeddings_require_grad: bool,
    /// Replaces `E[x_j]` rows, e.g. with perturbed copies. `[|x|, d]`.
    pub src_embeddings: Option<Tensor>,
    /// Replaces `E[y_i]` rows for the decoder inputs. `[|y| - 1, d]`.
    pub tgt_embeddings: Option<Tensor>,
    pub dropout: Option<DropoutSpec>,
    /// Constants added to encoder-decoder value vectors, for probing.
    pub value_offsets: Vec<ValueOffset>,
}

/// Adds `offset` (`[|x|, d_k]`) to the value vectors of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueOffset {
    pub layer: usize,
    pub head: usize,
    pub offset: Tensor,
}

/// Tape nodes of one encoder-decoder attention module.
#[derive(Clone, Debug)]
pub struct CrossAttentionVars {
    /// Per head value vectors `v_j^h`, `[|x|, d_k]`.
    pub values: Vec<Var>,
    /// Per head attention weights, `[decoder positions, |x|]`.
    pub weights: Vec<Var>,
    /// Per head outputs `z_t^h`.
    pub heads: Vec<Var>,
    /// Merged, projected output `attn_t`.
    pub output: Var,
}

struct AttentionVars {
    values: Vec<Var>,
    weights: Vec<Var>,
    heads: Vec<Var>,
    output: Var,
}

fn linear(tape: &mut Tape<'_>, l: &Linear<Var>, x: Var) -> Var {
    let y = tape.matmul(x, l.weight);
    tape.add_row(y, l.bias)
}

fn norm(tape: &mut Tape<'_>, n: &LayerNorm<Var>, x: Var) -> Var {
    tape.layer_norm(x, n.gain, n.bias)
}

fn feed_forward(tape: &mut Tape<'_>, ff: &FeedForward<Var>, x: Var) -> Var {
    let h = linear(tape, &ff.inner, x);
    let h = tape.relu(h);
    linear(tape, &ff.outer, h)
}

fn attention(
    tape: &mut Tape<'_>,
    a: &Attention<Var>,
    query_in: Var,
    kv_in: Var,
    heads: usize,
    causal: bool,
    value_offsets: &[(usize, &Tensor)],
) -> AttentionVars {
    let d = tape.value(query_in).cols();
    let dk = d / heads;
    let q = linear(tape, &a.query, query_in);
    let k = linear(tape, &a.key, kv_in);
    let v = linear(tape, &a.value, kv_in);
    let scale = 1.0 / libm::sqrt(dk as f64);
    let mut out = AttentionVars { values: Vec::new(), weights: Vec::new(), heads: Vec::new(), output: q };
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk);
        let kh = tape.slice_cols(k, h * dk, dk);
        let mut vh = tape.slice_cols(v, h * dk, dk);
        for (_, offset) in value_offsets.iter().filter(|(head, _)| *head == h) {
            let c = tape.leaf((*offset).clone(), false);
            vh = tape.add(vh, c);
        }
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, scale);
        let w = if causal { tape.causal_softmax(scores) } else { tape.softmax(scores) };
        let z = tape.matmul(w, vh);
        out.values.push(vh);
        out.weights.push(w);
        out.heads.push(z);
    }
    let merged = tape.concat_cols(&out.heads);
    out.output = linear(tape, &a.output, merged);
    out
}

fn embed_inputs(tape: &mut Tape<'_>, tokens: Var, d: usize) -> Var {
    let len = tape.value(tokens).rows();
    let scaled = tape.scale(tokens, libm::sqrt(d as f64));
    let pe = tape.leaf(positional_encoding(len, d), false);
    tape.add(scaled, pe)
}

fn check_ids(ids: &[usize], vocab: usize, max_len: usize) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    if ids.len() > max_len {
        return Err(Error::SequenceTooLong { len: ids.len(), max: max_len });
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::OutOfVocab { id, vocab });
    }
    Ok(())
}

/// Checks a source sequence: nonempty, in vocabulary, within the length
/// limit and closed by `</s>`.
pub fn validate_source(config: &ModelConfig, src: &[usize]) -> Result<()> {
    check_ids(src, config.src_vocab, config.max_len)?;
    if src.last() != Some(&config.eos_id) {
        return Err(Error::MissingEndSentinel);
    }
    Ok(())
}

/// Checks a framed target `</s> y_1 … y_m </s>`.
pub fn validate_target(config: &ModelConfig, tgt: &[usize]) -> Result<()> {
    check_ids(tgt, config.tgt_vocab, config.max_len)?;
    if tgt.len() < 2 || tgt[0] != config.eos_id || tgt[tgt.len() - 1] != config.eos_id {
        return Err(Error::InvalidConfig(format!(
            "target must be framed by </s> (id {}) on both ends",
            config.eos_id
        )));
    }
    Ok(())
}

fn check_embedding_override(t: &Tensor, rows: usize, d: usize, side: &'static str) -> Result<()> {
    if t.shape() != [rows, d] {
        return Err(Error::ShapeMismatch {
            context: side,
            detail: format!("expected [{rows}, {d}], got {:?}", t.shape()),
        });
    }
    Ok(())
}

fn encoder_stack(
    tape: &mut Tape<'_>,
    w: &Weights<Var>,
    config: &ModelConfig,
    tokens: Var,
    dropout: &mut Option<Dropout>,
) -> Var {
    let x = embed_inputs(tape, tokens, config.d_model);
    let mut x = maybe_drop(tape, dropout, x);
    for layer in &w.encoder {
        let h = norm(tape, &layer.self_norm, x);
        let a = attention(tape, &layer.self_attn, h, h, config.heads, false, &[]);
        let a = maybe_drop(tape, dropout, a.output);
        x = tape.add(x, a);
        let h = norm(tape, &layer.ff_norm, x);
        let f = feed_forward(tape, &layer.ff, h);
        let f = maybe_drop(tape, dropout, f);
        x = tape.add(x, f);
    }
    norm(tape, &w.encoder_norm, x)
}

fn decoder_stack(
    tape: &mut Tape<'_>,
    w: &Weights<Var>,
    config: &ModelConfig,
    tokens: Var,
    encoder_output: Var,
    dropout: &mut Option<Dropout>,
    value_offsets: &[ValueOffset],
) -> (Var, Vec<CrossAttentionVars>) {
    let s = embed_inputs(tape, tokens, config.d_model);
    let mut s = maybe_drop(tape, dropout, s);
    let mut cross = Vec::with_capacity(w.decoder.len());
    for (l, layer) in w.decoder.iter().enumerate() {
        let offsets: Vec<(usize, &Tensor)> =
            value_offsets.iter().filter(|o| o.layer == l).map(|o| (o.head, &o.offset)).collect();
        let h = norm(tape, &layer.self_norm, s);
        let a = attention(tape, &layer.self_attn, h, h, config.heads, true, &[]);
        let a = maybe_drop(tape, dropout, a.output);
        s = tape.add(s, a);
        let h = norm(tape, &layer.cross_norm, s);
        let c = attention(tape, &layer.cross_attn, h, encoder_output, config.heads, false, &offsets);
        let attn_t = maybe_drop(tape, dropout, c.output);
        s = tape.add(s, attn_t);
        cross.push(CrossAttentionVars { values: c.values, weights: c.weights, heads: c.heads, output: c.output });
        let h = norm(tape, &layer.ff_norm, s);
        let f = feed_forward(tape, &layer.ff, h);
        let f = maybe_drop(tape, dropout, f);
        s = tape.add(s, f);
    }
    let s = norm(tape, &w.decoder_norm, s);
    (linear(tape, &w.output, s), cross)
}

/// A teacher-forced pass recorded on its own tape.
pub struct TracedPass<'a> {
    pub tape: Tape<'a>,
    pub weights: Weights<Var>,
    /// Token embeddings before scaling and positions, `[|x|, d]`.
    pub src_embed: Var,
    /// Decoder-input token embeddings, `[|y| - 1, d]`.
    pub tgt_embed: Var,
    pub encoder_output: Var,
    pub cross: Vec<CrossAttentionVars>,
    /// Unnormalized scores over the target vocabulary per decoder position.
    pub logits: Var,
    /// Decoder inputs `y_0 … y_m`.
    pub decoder_inputs: Vec<usize>,
    /// Reference tokens `y_1 … y_{m+1}` predicted at each position.
    pub targets: Vec<usize>,
}

impl<'a> TracedPass<'a> {
    /// Runs source `src` and framed target `tgt` through the model.
    pub fn run(params: &'a ModelParams, src: &[usize], tgt: &[usize], opts: PassOptions) -> Result<Self> {
        let config = &params.config;
        validate_source(config, src)?;
        validate_target(config, tgt)?;
        let d = config.d_model;
        let decoder_inputs = tgt[..tgt.len() - 1].to_vec();
        let targets = tgt[1..].to_vec();
        let mut tape = Tape::new();
        let weights = params.weights.map(&mut |t| tape.leaf_ref(t, opts.params_require_grad));
        let src_embed = match opts.src_embeddings {
            Some(t) => {
                check_embedding_override(&t, src.len(), d, "source embeddings")?;
                tape.leaf(t, opts.embeddings_require_grad)
            }
            None => tape.gather(weights.src_embed, src),
        };
        let tgt_embed = match opts.tgt_embeddings {
            Some(t) => {
                check_embedding_override(&t, decoder_inputs.len(), d, "target embeddings")?;
                tape.leaf(t, opts.embeddings_require_grad)
            }
            None => tape.gather(weights.tgt_embed, &decoder_inputs),
        };
        let mut dropout = opts.dropout.filter(|d| d.rate > 0.0).map(|d| Dropout {
            rate: d.rate,
            rng: ChaCha8Rng::seed_from_u64(d.seed),
        });
        let encoder_output = encoder_stack(&mut tape, &weights, config, src_embed, &mut dropout);
        let (logits, cross) = decoder_stack(&mut tape, &weights, config, tgt_embed, encoder_output, &mut dropout, &opts.value_offsets);
        tape.check_finite(logits)?;
        Ok(TracedPass { tape, weights, src_embed, tgt_embed, encoder_output, cross, logits, decoder_inputs, targets })
    }

    /// Appends `log P(y_{t+1} | y_≤t, x)` for every position, as a vector node.
    pub fn reference_log_probs(&mut self) -> Var {
        let lp = self.tape.log_softmax(self.logits);
        self.tape.pick(lp, &self.targets)
    }

    /// Copies the encoder-decoder attention internals off the tape.
    pub fn record(&self) -> AttentionRecord {
        let layers = self
            .cross
            .iter()
            .map(|c| {
                let merged = self.tape.value(c.output).clone();
                CrossAttentionRecord {
                    weights: c.weights.iter().map(|&w| self.tape.value(w).clone()).collect(),
                    value_norms: c.values.iter().map(|&v| self.tape.value(v).row_norms()).collect(),
                    head_outputs: c.heads.iter().map(|&z| self.tape.value(z).clone()).collect(),
                    output_norms: merged.row_norms(),
                    merged_output: merged,
                }
            })
            .collect();
        AttentionRecord { layers, encoder_output: self.tape.value(self.encoder_output).clone() }
    }

    /// Row-wise argmax of the logits (lowest index wins ties).
    pub fn predictions(&self) -> Vec<usize> {
        let logits = self.tape.value(self.logits);
        (0..logits.rows()).map(|r| argmax(logits.row(r))).collect()
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Output of [`forward_teacher_forced`].
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherForced {
    /// `log P(y_t | y_<t, x)` for `t = 1 … |y| - 1`.
    pub log_probs: Vec<f64>,
    pub record: AttentionRecord,
}

/// Raw embedding rows `E[ids]` of `table`, before scaling and positions.
pub fn embedding_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let d = table.cols();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= table.rows() {
            return Err(Error::OutOfVocab { id, vocab: table.rows() });
        }
        data.extend_from_slice(table.row(id));
    }
    Ok(Tensor::from_op(vec![ids.len(), d], data))
}

/// Dropout-free teacher-forced pass over a framed target.
pub fn forward_teacher_forced(params: &ModelParams, src: &[usize], tgt: &[usize]) -> Result<TeacherForced> {
    let mut pass = TracedPass::run(params, src, tgt, PassOptions::default())?;
    let lp = pass.reference_log_probs();
    pass.tape.check_finite(lp)?;
    Ok(TeacherForced { log_probs: pass.tape.value(lp).data().to_vec(), record: pass.record() })
}

/// Final encoder states for a source sequence, `[|x|, d_model]`.
pub fn encode(params: &ModelParams, src: &[usize]) -> Result<Tensor> {
    validate_source(&params.config, src)?;
    let mut tape = Tape::new();
    let weights = params.weights.map(&mut |t| tape.leaf_ref(t, false));
    let tokens = tape.gather(weights.src_embed, src);
    let e = encoder_stack(&mut tape, &weights, &params.config, tokens, &mut None);
    tape.check_finite(e)?;
    Ok(tape.value(e).clone())
}

/// One attention head: `α = softmax(q Kᵀ / √d_k)`, `z = α V`.
///
/// `query` is `[n, d_k]` (or a single `[d_k]` vector), `keys` `[|x|, d_k]`
/// and `values` `[|x|, d_v]`. Returns `(z, α)`.
pub fn attention_head(query: &Tensor, keys: &Tensor, values: &Tensor) -> Result<(Tensor, Tensor)> {
    let vector = query.shape().len() == 1;
    let q = if vector { Tensor::matrix(1, query.len(), query.data().to_vec())? } else { query.clone() };
    if q.cols() != keys.cols() || keys.rows() != values.rows() || keys.rows() == 0 {
        return Err(Error::ShapeMismatch {
            context: "attention_head",
            detail: format!("query {:?}, keys {:?}, values {:?}", query.shape(), keys.shape(), values.shape()),
        });
    }
    let mut tape = Tape::new();
    let qv = tape.leaf(q, false);
    let kv = tape.leaf_ref(keys, false);
    let vv = tape.leaf_ref(values, false);
    let scores = tape.matmul_nt(qv, kv);
    let scores = tape.scale(scores, 1.0 / libm::sqrt(keys.cols() as f64));
    let alpha = tape.softmax(scores);
    let z = tape.matmul(alpha, vv);
    tape.check_finite(z)?;
    let (mut z, mut alpha) = (tape.value(z).clone(), tape.value(alpha).clone());
    if vector {
        z = Tensor::vector(z.into_data())?;
        alpha = Tensor::vector(alpha.into_data())?;
    }
    Ok((z, alpha))
}

/// Greedy decoding: repeatedly appends the most probable next token until
/// `</s>` is produced or `max_len` tokens have been generated. The result
/// excludes the leading `</s>` and includes the closing one when produced.
pub fn greedy_decode(params: &ModelParams, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    let config = &params.config;
    let e = encode(params, src)?;
    let eos = config.eos_id;
    let mut prefix = vec![eos];
    let mut out = Vec::new();
    while out.len() < max_len && prefix.len() <= config.max_len {
        let mut tape = Tape::new();
        let weights = params.weights.map(&mut |t| tape.leaf_ref(t, false));
        let ev = tape.leaf_ref(&e, false);
        let tokens = tape.gather(weights.tgt_embed, &prefix);
        let (logits, _) = decoder_stack(&mut tape, &weights, config, tokens, ev, &mut None, &[]);
        tape.check_finite(logits)?;
        let lv = tape.value(logits);
        let next = argmax(lv.row(lv.rows() - 1));
        out.push(next);
        if next == eos {
            break;
        }
        prefix.push(next);
    }
    Ok(out)
}
