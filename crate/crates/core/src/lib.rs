//! Desk-scale attention-based encoder-decoder translation toolkit.
//!
//! The decoder is extended with two extra recurrent layers that keep an
//! explicit account of the source sentence during generation: one holds the
//! content still untranslated (updated by soft subtraction of each step's
//! attention context, with three cell variants for the subtraction) and one
//! holds the content already translated (updated by accumulation). Both
//! states feed the attention scorer and the decoder state, and two
//! auxiliary softmax losses tie their per-step deltas to the word being
//! produced.
//!
//! Everything runs on a small f64 reverse-mode tape (`tensor`), so all
//! models are gradient-checkable end to end.

pub mod attention;
pub mod cells;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod init;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
