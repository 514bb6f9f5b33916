//! fakeforge: a dataset-construction and evaluation harness for synthetic-image
//! detection with natural-language artifact explanations.
//!
//! The crate builds VQA-style datasets by running category-conditioned
//! annotation prompts through several vision-language model endpoints and
//! merging their captions, then benchmarks any chat-capable model on detection
//! accuracy, explanation quality, and robustness to common image distortions.
//! A linear probe over frozen visual features provides the classical baseline.
//!
//! Start with the runnable examples (`cargo run --example <name>`), or the
//! `fakeforge` binary for the file-in/file-out pipeline.

pub mod annotation;
pub mod cli;
pub mod config;
pub mod datamodel;
pub mod dataset;
pub mod digest;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod gateway;
pub mod metrics;
pub mod mock;
pub mod perturb;
pub mod probe;
pub mod prompts;

pub use error::{Error, Result};
