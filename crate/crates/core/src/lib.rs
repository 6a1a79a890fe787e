//! Synchronous federated averaging over simulated non-IID imaging sites,
//! with best-local-model selection, local fine-tuning and cross-site
//! evaluation by linear weighted kappa.
//!
//! Module map:
//! - [`nn`]: tensors, the classifier, loss/gradients, Adam, LR schedule
//! - [`protocol`]: aggregation, the server state machine, wire codec, transports
//! - [`client`]: local training, balanced sampling, augmentation, model selection
//! - [`data`]: synthetic multi-site datasets and their file format
//! - [`eval`]: weighted kappa, cross-site matrices, summaries and reports
//! - [`cli`]: the `fedkappa` subcommands

pub mod cli;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod par;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};
