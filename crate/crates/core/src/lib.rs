//! Encoder-decoder transformer with reverse-mode autodiff, plus tools for
//! reading word alignments out of its encoder-decoder attention.
//!
//! The crate is `no_std` (it needs `alloc`). Enable the `std` feature for
//! runtime CPU detection in the matrix kernels.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod alignment;
pub mod attribution;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod model;
pub mod probes;
pub mod seed;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::{Executor, Sequential};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
