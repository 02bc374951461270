use alloc::format;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the encoder-decoder transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Longest source or framed target sequence accepted.
    pub max_len: usize,
    /// Id of `</s>` in both vocabularies.
    pub eos_id: usize,
    /// Dropout probability, applied only while training.
    pub dropout: f64,
}

impl ModelConfig {
    /// 2 + 2 layers, 4 heads, `d_model` 64, `d_ff` 128.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 128,
            src_vocab,
            tgt_vocab,
            max_len: 64,
            eos_id: 0,
            dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.eos_id >= self.src_vocab || self.eos_id >= self.tgt_vocab {
            return Err(Error::InvalidConfig(format!("eos id {} outside a vocabulary", self.eos_id)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid() {
        let c = ModelConfig::desk(100, 120);
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 16);
    }

    #[test]
    fn rejects_indivisible_heads_and_zero_dims() {
        let mut c = ModelConfig::desk(10, 10);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(10, 10);
        c.decoder_layers = 0;
        assert!(c.validate().is_err());
    }
}
