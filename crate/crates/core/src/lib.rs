//! Multi-agent learning where policies, credit and gradients are all text.
//!
//! Agents act from natural-language policies. A critic reads finished
//! trajectories and assigns per-agent credit in prose, each agent turns its
//! credit into a textual gradient, and an optimizer rewrites the policy.

pub mod backend;
pub mod config;
pub mod env;
pub mod error;
pub mod learning;
pub mod metrics;
pub mod prompts;
pub mod rollout;
pub mod run;
pub mod store;
pub mod types;

#[cfg(test)]
mod testutil;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use run::{train, RunDir};
