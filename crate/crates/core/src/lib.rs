//! Multi-vector late-interaction retrieval with a modular, per-language
//! adapter encoder and a residual-compressed inverted-file index.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod scoring;
pub mod tokenizer;

mod io;

pub use error::{Error, Result};
