//! Deep Q-learning trader for a single asset on daily OHLC candles.
//!
//! The pipeline runs from [`marketdata`] (CSV ingestion, splits, state
//! construction) through [`tradeenv`] and [`encoders`] into [`dqnagent`],
//! whose trained policies are scored by [`backtest`] with the measures in
//! [`metrics`]. [`cli`] wires these into the `candle-dqn` binary.

pub mod backtest;
pub mod cli;
pub mod config;
pub mod dqnagent;
pub mod encoders;
pub mod error;
pub mod marketdata;
pub mod metrics;
pub mod tradeenv;

pub use error::{Error, Result};
