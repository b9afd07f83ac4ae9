//! Core library for population-size-aware policy optimization.
//!
//! Pieces, bottom to top:
//! - [`env`]: N-agent grid/circle games whose rewards couple each agent to
//!   the empirical distribution of the whole population.
//! - [`encoding`]: binary (and raw) population-size encodings.
//! - [`tensor`] / [`graph`] / [`adam`]: a dense f64 reverse-mode autodiff
//!   engine sized for three-layer policy networks and the hypernetworks that
//!   generate them.
//! - [`nets`]: the six actor-critic architectures, from plain PPO nets to
//!   hypernetwork-generated, population-augmented policies.
//! - [`trainer`]: clipped-surrogate PPO with truncated GAE and multi-task
//!   training across population sizes.
//! - [`nashconv`]: approximate-NashConv evaluation via best-response training.
//! - [`analysis`]: CKA similarity curves, scaling-law fits with p-values,
//!   KL-to-uniform diagnostics, reward-distribution statistics, and
//!   activation export.
//! - [`config`] / [`checkpoint`]: experiment configuration and the binary
//!   checkpoint format.

pub mod adam;
pub mod analysis;
pub mod fit;
pub mod checkpoint;
pub mod config;
pub mod encoding;
pub mod env;
pub mod error;
pub mod graph;
pub mod nashconv;
pub mod nets;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
