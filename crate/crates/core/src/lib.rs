//! Online influence maximization under the independent cascade model with
//! node-level feedback.

pub mod audit;
pub mod bandit;
pub mod cascade;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod feedback;
pub mod generate;
pub mod graph;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
