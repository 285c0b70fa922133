//! OCR-aware image captioning at desk scale.
//!
//! An attention-on-attention encoder-decoder over image-region and OCR-token
//! features, with a pointer-generator copy channel over an OCR-extended
//! vocabulary. Includes reverse-mode autodiff, training, beam-search and
//! top-k decoding, and caption metrics (BLEU-4, ROUGE-L, CIDEr-D).

pub mod autodiff;
pub mod checkpoint;
pub mod decoding;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod pointer;
pub mod tokenize;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
