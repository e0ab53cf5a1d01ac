//! Hypothesis-planned exploration for model-based meta-RL.
//!
//! A pool of latent dynamics models is meta-trained on a family of tasks.
//! When a new task arrives, a short experiment is planned to make the pool's
//! predictions disagree as much as possible, and the model that best explains
//! the outcome is adopted and fine-tuned.

pub mod dynamics;
pub mod encoder;
pub mod envs;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod planning;
pub mod primitives;
pub mod separation;
pub mod theory;
mod trie;

pub use error::{Error, Result};
