//! Hierarchical policy networks for spatiotemporal trajectory imitation.
//!
//! The crate covers the data pipeline (court geometry, possession
//! ingestion and synthesis, weak-label extraction), the policy network and
//! its baselines, multi-stage training, rollouts and benchmarking.

pub mod config;
pub mod error;
pub mod evalbench;
pub mod grid;
pub mod policy_net;
pub mod rollout;
pub mod seed;
pub mod training;
pub mod trajdata;
pub mod weak_labels;

pub use error::{Error, Result};
pub use grid::{CourtSpec, MacroGoalBox, MicroCell, VelocityAction};
