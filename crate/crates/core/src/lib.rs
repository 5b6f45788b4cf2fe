//! Flow-matching pretraining, DDPO and advantage weighted matching on analytic Gaussian
//! mixtures, plus Monte-Carlo checks of the score-matching identities behind them.

pub mod analytic;
pub mod config;
pub mod error;
pub mod field;
pub mod metrics;
pub mod net;
pub mod pretrain;
pub mod registry;
pub mod rl;
pub mod sampler;
pub mod schedule;
pub mod varlab;

pub use error::{Error, Result};
