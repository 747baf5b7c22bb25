//! Core of a desk-scale GUI-agent reinforcement learning pipeline.
//!
//! The action grammar, reward functions, synthetic GUI world, analytic
//! softmax policy, GRPO trainer, checkpoint merging and trace refinement all
//! live here; the device gateway and the command line are separate crates.

pub mod action;
pub mod env;
pub mod grpo;
pub mod merge;
pub mod metrics;
pub mod params;
pub mod policy;
pub mod refine;
pub mod reward;
pub mod rollout;
pub mod tasks;
pub mod trajectory;
pub mod util;
