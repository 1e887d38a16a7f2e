//! Character-level word generators for extending small vocabularies.
//!
//! Three generator families are provided on top of a small reverse-mode
//! autodiff engine ([`tape`]):
//!
//! - [`rnn`]: character language model seeded by an indicator symbol,
//! - [`seq2seq`]: GRU encoder/decoder with additive attention,
//! - [`style`]: cross-aligned autoencoder trained on non-parallel word lists.
//!
//! [`eval`] computes the vocabulary metrics used to judge generated words and
//! [`checkpoint`] persists trained models.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod rng;
pub mod rnn;
pub mod seq2seq;
pub mod style;
pub mod tape;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
