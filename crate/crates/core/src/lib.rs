//! Deterministic multi-agent simulator for collaborative distributed machine learning.

pub mod archetypes;
pub mod harness;
pub mod interim;
pub mod ml_core;
pub mod netsim;
pub mod parallel;
pub mod protocol;

/// Agent identifier; the configurator of every preset roster is agent 0.
pub type AgentId = u32;
