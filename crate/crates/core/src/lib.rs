//! Cross-lingual document retrieval with a smooth cosine similarity and a
//! smooth ordinal search loss.
//!
//! The pipeline is a pair of average-pooling tanh encoders (one per language)
//! scored by a cosine similarity with an additive norm smoother `ε`, trained
//! against ordinal relevance labels with a thresholded piecewise-quadratic
//! loss. All gradients are written out by hand; [`gradcheck`] holds the
//! finite-difference and brute-force oracles used to verify them.
//!
//! Module map:
//!
//! - [`corpus`]: on-disk corpus format, vocabularies, negative sampling, splits
//!   and the planted synthetic bilingual generator.
//! - [`encoder`]: embedding tables, mean-pool + tanh encoding and its backward
//!   pass, checkpoints.
//! - [`similarity`]: smooth cosine similarity with its gradient bound.
//! - [`loss`]: the ordinal losses (smooth ordinal search loss, MSE, proportional odds).
//! - [`optim`]: gradient packets, clipping, lazy sparse Adam and `c/t` SGD.
//! - [`metrics`]: ranking metrics (P_mr@k, P_r@5, NDCG@5, MAP, MRR).
//! - [`trainer`]: training loop, evaluation and the experiment drivers.
//! - [`gradcheck`]: independent numerical oracles.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod similarity;
pub mod trainer;

pub use error::{Error, Result};
