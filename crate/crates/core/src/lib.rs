//! Active learning with selection through a cheap proxy over pre-computed
//! features, plus an alignment trigger that refreshes those features from a
//! fine-tuned backbone.

pub mod alignment;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod error;
pub mod feature_store;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod probs;
pub mod proxy_model;
pub mod rng;
pub mod strategies;

pub use error::{Error, Result};
