//! Joint prompt generation and hypernetwork-generated LoRA adaptation on
//! micro decoder-only transformers, with a synthetic task suite that has
//! exact rewards.
//!
//! The crate is organised bottom-up: [`numerics`] (tape, optimizer),
//! [`microlm`] (the transformer used both as prompt generator and actor),
//! [`adapters`] (LoRA factors and the hypernetwork), [`pipeline`] (the
//! shared-encoder model), [`training`] (warm-up, rollouts, joint objective,
//! schedules) and [`tasks`] (vocabulary, datasets, rewards).

pub mod error;
pub mod numerics;

pub use error::{Error, Result};

/// Crate version, recorded in run directories.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod checkpoint;
pub mod microlm;
pub mod tasks;
pub mod adapters;
pub mod pipeline;
pub mod training;
