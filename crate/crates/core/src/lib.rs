//! Portfolio allocation with local Gaussian correlation.
//!
//! Pairwise local Gaussian fits around a grid point assemble a local
//! covariance matrix, which feeds mean-variance and minimum-variance
//! optimizers inside a rolling monthly backtest.

pub mod backtest;
pub mod data;
pub mod lgc;
pub mod local_cov;
pub mod metrics;
pub mod optimizer;
pub mod panel;
pub mod parallel;
pub mod report;
pub mod stats;
pub mod synth;
