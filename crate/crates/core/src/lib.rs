//! Cross-sectional stock ranking from raw multi-frequency market data.
//!
//! The crate covers the whole research loop: a small reverse-mode
//! differentiation engine, a fusion/inter-stock attention ranker, the
//! pairwise monotonic logistic loss with cross-section sub-sampling,
//! AdamW training with a Noam schedule, evaluation metrics, a
//! deterministic open-execution backtester and classic intraday factors.

pub mod backtest;
pub mod error;
pub mod features;
pub mod loss;
pub mod marketdata;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
