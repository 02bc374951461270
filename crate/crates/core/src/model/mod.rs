//! Pre-norm encoder-decoder transformer built on the tape.

mod config;
mod forward;
mod params;
mod record;

pub use config::ModelConfig;
pub use forward::{
    attention_head, embedding_rows, encode, forward_teacher_forced, greedy_decode, positional_encoding, validate_source,
    validate_target, CrossAttentionVars, DropoutSpec, PassOptions, TeacherForced, TracedPass, ValueOffset,
};
pub(crate) use forward::argmax;
pub use params::{Attention, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, ModelParams, Weights};
pub use record::{AttentionRecord, CrossAttentionRecord};
