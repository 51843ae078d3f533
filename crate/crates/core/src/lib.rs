//! driftbench-core: a two-stage recurrent sequence classifier for
//! multi-channel time series, with input-transform domain adaptation and
//! divergence metrics computed from per-window cross-entropy loss
//! distributions.
//!
//! The pipeline: raw trials are standardized, rectified and smoothed, cut
//! into overlapping windows, and classified by a stacked-LSTM many-to-one
//! network. Stage I trains the classifier on a source domain. Stage II
//! freezes it and trains a small per-timestep input transform (linear or
//! deep) on a labelled subset of a shifted target domain. Domain divergence
//! is read off the distribution of per-window losses of the frozen source
//! classifier, without access to source samples.

pub mod checkpoint;
pub mod dataio;
pub mod divergence;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
