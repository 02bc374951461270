use alloc::string::String;
use core::fmt;

/// Errors surfaced by the analysis core.
///
/// Shape mismatches inside the tape are programming errors and panic
/// instead of appearing here.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// A tensor was built from data whose length disagrees with its shape.
    ShapeMismatch { context: &'static str, detail: String },
    /// A NaN or infinity appeared; `node` is the first offending tape node.
    NonFinite { node: usize, op: &'static str },
    SeedNotOnTape,
    OutOfVocab { id: usize, vocab: usize },
    SequenceTooLong { len: usize, max: usize },
    EmptySequence,
    MissingEndSentinel,
    InvalidConfig(String),
    LayerOutOfRange { layer: usize, layers: usize },
    InvalidHeadWeights(String),
    InvalidMask(String),
    TooFewSamples { samples: usize },
    /// Malformed alignment or corpus text; `line` is 1-based.
    Parse { line: usize, message: String },
    IndexOverflow { line: usize, index: usize, len: usize },
    LineCountMismatch { source: usize, target: usize, gold: Option<usize> },
    VocabExhausted { needed: usize, limit: usize },
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, step: u64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context, detail } => {
                write!(f, "shape mismatch in {context}: {detail}")
            }
            Error::NonFinite { node, op } => {
                write!(f, "non-finite value produced by {op} at tape node {node}")
            }
            Error::SeedNotOnTape => f.write_str("seed output is not a node of this tape"),
            Error::OutOfVocab { id, vocab } => {
                write!(f, "token id {id} outside vocabulary of size {vocab}")
            }
            Error::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds maximum {max}")
            }
            Error::EmptySequence => f.write_str("empty token sequence"),
            Error::MissingEndSentinel => f.write_str("source sequence must end with </s>"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::LayerOutOfRange { layer, layers } => {
                write!(f, "layer {layer} out of range for a model with {layers} layers")
            }
            Error::InvalidHeadWeights(msg) => write!(f, "invalid head weights: {msg}"),
            Error::InvalidMask(msg) => write!(f, "invalid mask: {msg}"),
            Error::TooFewSamples { samples } => {
                write!(f, "variance estimate needs at least 2 samples, got {samples}")
            }
            Error::Parse { line, message } => write!(f, "line {line}: {message}"),
            Error::IndexOverflow { line, index, len } => {
                write!(f, "line {line}: index {index} out of range for length {len}")
            }
            Error::LineCountMismatch { source, target, gold } => match gold {
                Some(g) => write!(f, "line counts differ: source {source}, target {target}, gold {g}"),
                None => write!(f, "line counts differ: source {source}, target {target}"),
            },
            Error::VocabExhausted { needed, limit } => {
                write!(f, "corpus needs {needed} vocabulary entries but the limit is {limit}")
            }
            Error::Diverged { epoch, step } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}, step {step}")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
