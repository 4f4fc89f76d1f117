//! Multiple-instance learning over bags of patch embeddings with a
//! query-based fusion transformer, trained jointly for bag classification and
//! caption generation.
//!
//! The pipeline for one bag:
//!
//! 1. instance correlation: residual multi-head self-attention over the bag
//!    (exact, or Nyström-approximated for large bags): [`attention`]
//! 2. projection to the fusion width and a stack of query blocks mixing
//!    learnable queries with caption tokens and image features: [`fusion`]
//! 3. an averaged-logit classifier and a small caption decoder, combined in
//!    an α-weighted loss: [`heads`]
//!
//! Everything runs on the small reverse-mode engine in [`tensor`].

pub mod attention;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
