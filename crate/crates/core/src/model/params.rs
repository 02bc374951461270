//! Parameter layout.
//!
//! Every parameter group is generic over its leaf type: `Tensor` for stored
//! weights, [`crate::Var`] once the weights are placed on a tape. Visiting
//! order is fixed and doubles as the checkpoint and optimizer order.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

/// A single tensor slot.
pub type Leaf<T> = T;

macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident : $kind:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: $kind<T>,)*
        }

        impl<T> $name<T> {
            pub fn visit<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s T)>) {
                $(param_group!(@visit $kind self.$field, join(prefix, stringify!($field)), out);)*
            }

            pub fn visit_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut T)>) {
                $(param_group!(@visit_mut $kind self.$field, join(prefix, stringify!($field)), out);)*
            }

            pub fn map<'s, U, F: FnMut(&'s T) -> U>(&'s self, f: &mut F) -> $name<U> {
                $name { $($field: param_group!(@map $kind self.$field, f),)* }
            }
        }
    };
    (@visit Leaf $e:expr, $path:expr, $out:ident) => { $out.push(($path, &$e)) };
    (@visit $kind:ident $e:expr, $path:expr, $out:ident) => { $e.visit(&$path, $out) };
    (@visit_mut Leaf $e:expr, $path:expr, $out:ident) => { $out.push(($path, &mut $e)) };
    (@visit_mut $kind:ident $e:expr, $path:expr, $out:ident) => { $e.visit_mut(&$path, $out) };
    (@map Leaf $e:expr, $f:ident) => { $f(&$e) };
    (@map $kind:ident $e:expr, $f:ident) => { $e.map($f) };
}

param_group!(
    /// `y = x · weight + bias` with `weight: [in, out]`.
    Linear { weight: Leaf, bias: Leaf }
);
param_group!(LayerNorm { gain: Leaf, bias: Leaf });
param_group!(
    /// Multi-head attention projections. Head `h` owns columns
    /// `h·d_k .. (h+1)·d_k` of the query, key and value projections.
    Attention { query: Linear, key: Linear, value: Linear, output: Linear }
);
param_group!(FeedForward { inner: Linear, outer: Linear });
param_group!(EncoderLayer { self_norm: LayerNorm, self_attn: Attention, ff_norm: LayerNorm, ff: FeedForward });
param_group!(
    /// Pre-norm decoder layer. The encoder-decoder attention output joins
    /// the running target representation through a plain residual add.
    DecoderLayer {
        self_norm: LayerNorm,
        self_attn: Attention,
        cross_norm: LayerNorm,
        cross_attn: Attention,
        ff_norm: LayerNorm,
        ff: FeedForward,
    }
);

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub src_embed: T,
    pub tgt_embed: T,
    pub encoder: Vec<EncoderLayer<T>>,
    pub encoder_norm: LayerNorm<T>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub decoder_norm: LayerNorm<T>,
    pub output: Linear<T>,
}

impl<T> Weights<T> {
    pub fn visit<'s>(&'s self, out: &mut Vec<(String, &'s T)>) {
        out.push((String::from("src_embed"), &self.src_embed));
        out.push((String::from("tgt_embed"), &self.tgt_embed));
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&format!("encoder.{i}"), out);
        }
        self.encoder_norm.visit("encoder_norm", out);
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&format!("decoder.{i}"), out);
        }
        self.decoder_norm.visit("decoder_norm", out);
        self.output.visit("output", out);
    }

    pub fn visit_mut<'s>(&'s mut self, out: &mut Vec<(String, &'s mut T)>) {
        out.push((String::from("src_embed"), &mut self.src_embed));
        out.push((String::from("tgt_embed"), &mut self.tgt_embed));
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&format!("encoder.{i}"), out);
        }
        self.encoder_norm.visit_mut("encoder_norm", out);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&format!("decoder.{i}"), out);
        }
        self.decoder_norm.visit_mut("decoder_norm", out);
        self.output.visit_mut("output", out);
    }

    pub fn map<'s, U, F: FnMut(&'s T) -> U>(&'s self, f: &mut F) -> Weights<U> {
        Weights {
            src_embed: f(&self.src_embed),
            tgt_embed: f(&self.tgt_embed),
            encoder: self.encoder.iter().map(|l| l.map(f)).collect(),
            encoder_norm: self.encoder_norm.map(f),
            decoder: self.decoder.iter().map(|l| l.map(f)).collect(),
            decoder_norm: self.decoder_norm.map(f),
            output: self.output.map(f),
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.visit_mut(&mut out);
        out
    }
}

/// Trained or freshly initialized model weights with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Weights<Tensor>,
}

struct Init<'r, R: Rng> {
    rng: &'r mut R,
}

impl<R: Rng> Init<'_, R> {
    fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let dist = Uniform::new_inclusive(-a, a).expect("valid range");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(self.rng)).collect();
        Tensor::from_op(vec![fan_in, fan_out], data)
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Linear<Tensor> {
        Linear { weight: self.xavier(fan_in, fan_out), bias: Tensor::zeros(&[fan_out]) }
    }

    fn norm(&mut self, d: usize) -> LayerNorm<Tensor> {
        LayerNorm { gain: Tensor::from_op(vec![d], vec![1.0; d]), bias: Tensor::zeros(&[d]) }
    }

    fn attention(&mut self, d: usize) -> Attention<Tensor> {
        Attention { query: self.linear(d, d), key: self.linear(d, d), value: self.linear(d, d), output: self.linear(d, d) }
    }

    fn ff(&mut self, d: usize, d_ff: usize) -> FeedForward<Tensor> {
        FeedForward { inner: self.linear(d, d_ff), outer: self.linear(d_ff, d) }
    }

    fn embedding(&mut self, vocab: usize, d: usize) -> Tensor {
        let dist = Normal::new(0.0, 1.0 / libm::sqrt(d as f64)).expect("valid std");
        let data = (0..vocab * d).map(|_| dist.sample(self.rng)).collect();
        Tensor::from_op(vec![vocab, d], data)
    }
}

impl ModelParams {
    /// Xavier-uniform projections, `N(0, 1/d_model)` embeddings, unit
    /// layer-norm gains and zero biases.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.d_ff);
        let mut init = Init { rng };
        let src_embed = init.embedding(config.src_vocab, d);
        let tgt_embed = init.embedding(config.tgt_vocab, d);
        let encoder = (0..config.encoder_layers)
            .map(|_| EncoderLayer {
                self_norm: init.norm(d),
                self_attn: init.attention(d),
                ff_norm: init.norm(d),
                ff: init.ff(d, f),
            })
            .collect();
        let encoder_norm = init.norm(d);
        let decoder = (0..config.decoder_layers)
            .map(|_| DecoderLayer {
                self_norm: init.norm(d),
                self_attn: init.attention(d),
                cross_norm: init.norm(d),
                cross_attn: init.attention(d),
                ff_norm: init.norm(d),
                ff: init.ff(d, f),
            })
            .collect();
        let decoder_norm = init.norm(d);
        let output = init.linear(d, config.tgt_vocab);
        Ok(ModelParams {
            config,
            weights: Weights { src_embed, tgt_embed, encoder, encoder_norm, decoder, decoder_norm, output },
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.weights.named()
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds parameters from named tensors, checking every expected name
    /// and shape against `config`.
    pub fn from_named(config: ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let template = ModelParams::init(config.clone(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let mut weights = template.weights;
        for (name, slot) in weights.named_mut() {
            let t = tensors.remove(&name).ok_or_else(|| Error::InvalidConfig(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::ShapeMismatch {
                    context: "ModelParams::from_named",
                    detail: format!("{name}: expected {:?}, got {:?}", slot.shape(), t.shape()),
                });
            }
            *slot = t;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::InvalidConfig(format!("unexpected tensor {extra}")));
        }
        Ok(ModelParams { config, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_stable() {
        let p = ModelParams::init(ModelConfig::desk(10, 12), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let named = p.named();
        let names: alloc::collections::BTreeSet<_> = named.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names.len(), named.len());
        assert_eq!(named[0].0, "src_embed");
        assert!(names.contains("decoder.1.cross_attn.value.weight"));
        assert_eq!(named.last().unwrap().0, "output.bias");
    }

    #[test]
    fn from_named_round_trip() {
        let p = ModelParams::init(ModelConfig::desk(10, 12), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let map: BTreeMap<String, Tensor> = p.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let q = ModelParams::from_named(p.config.clone(), map.clone()).unwrap();
        assert_eq!(p, q);
        let mut missing = map;
        missing.remove("output.bias");
        assert!(ModelParams::from_named(p.config.clone(), missing).is_err());
    }
}
