//! Multi-level sequence denoising for next-item recommendation.
//!
//! The model reads a user's interaction history, builds a target-aware
//! interest vector from a transformer (long-term) and a pair of horizontal and
//! vertical convolutions (short-term), and uses it to score every item of the
//! history for relevance. Those scores drive two denoising paths:
//!
//! * a soft path that re-weights the history and feeds it to a pluggable
//!   backbone sequence encoder, whose output is used for prediction;
//! * a hard path that drops items through a straight-through Gumbel-softmax
//!   gate and encodes the compacted sequence with its own transformer.
//!
//! The two paths are tied by a contrastive loss and a BPR loss. Training uses
//! a sigmoid-paced curriculum over per-sample difficulty, and evaluation ranks
//! the held-out item against the full catalog.
//!
//! All tensors are [`candle_core::Tensor`]s so the same code runs in `f32` for
//! training and in `f64` for gradient checks.

pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod dataset;
pub mod denoise;
pub mod embedding;
pub mod error;
pub mod interest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod report;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
