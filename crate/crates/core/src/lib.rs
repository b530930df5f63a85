//! Diverse machine translation by mixup.
//!
//! A small encoder-decoder transformer, trained with or without mixup, that
//! produces several distinct translations of one input by interpolating its
//! embeddings with sampled training pairs during beam search. Faithfulness and
//! diversity are scored with reference BLEU, pairwise BLEU and EDA.

pub mod corpus;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod rng;
pub mod model;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
