//! Soft mixture-of-experts, hard-routing layers and convolutional feature
//! tokenizers for value-based reinforcement learning, together with the
//! tensor engine, environments, agents, plasticity interventions and
//! evaluation statistics needed to study them at desk scale.

pub mod diffcore;
pub mod envs;
pub mod error;
pub mod evalstats;
pub mod moe;
pub mod netzoo;
pub mod plasticity;
pub mod rlcore;
pub mod rng;
pub mod runner;
pub mod tokenize;

pub use error::{Error, Result};
