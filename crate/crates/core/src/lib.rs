//! Numerical laboratory for gradient balance in pairwise preference losses.
//!
//! The crate works with discrete prompt/response spaces and a tabular softmax
//! policy, where the per-epoch update theory is exact to first order. It
//! provides the DPO loss family with analytic gradients, the closed-form
//! epoch dynamics, Monte-Carlo and brute-force checks of the moment
//! inequalities behind them, and the toy training benchmark.

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod oracles;
pub mod policy;
pub mod rng;
pub mod stats;
pub mod task;

pub use error::{Error, Result};
