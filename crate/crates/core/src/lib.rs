//! Limit-order-book forecasting and trading evaluation.

pub mod backtest;
pub mod dataset;
pub mod features;
pub mod labeling;
pub mod market_data;
pub mod metrics;
pub mod models;
pub mod train;
