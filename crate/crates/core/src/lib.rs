//! Adaptive multi-intention inverse reinforcement learning.
//!
//! Expert demonstrations are clustered into an unknown number of intentions
//! with a Chinese-restaurant-process mixture of maximum-entropy trajectory
//! models. Each intention's reward is a head on a shared deep reward network.

pub mod crp;
pub mod envs;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod maxent;
pub mod mdp;
pub mod output;
pub mod reward_model;
pub mod trainers;

pub use error::{Error, Result};
