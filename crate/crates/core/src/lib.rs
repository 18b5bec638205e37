//! Recurrent sequence models built around a unified-gating LSTM cell with
//! block-level additive skips, together with LSTM, GRU and BiLSTM baselines,
//! exact parameter accounting, gradient checking, a gradient-flow profiler,
//! evaluation metrics and a training loop.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the CLI and the test suites use.

pub mod cells;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradflow;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng, Scalar};

pub type Matrix64 = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type Model64 = network::Model<f64>;
pub type Model32 = network::Model<f32>;
pub type Gradients64 = network::Gradients<f64>;
pub type LstmParams64 = cells::LstmParams<f64>;
pub type PsugParams64 = cells::PsugParams<f64>;
pub type GruParams64 = cells::GruParams<f64>;
pub type SkipParams64 = cells::SkipParams<f64>;
pub type QLState64 = cells::QLState<f64>;
