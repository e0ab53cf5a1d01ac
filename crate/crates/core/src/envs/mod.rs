//! Executable environments: the hypercube Alchemy family with text
//! observations, the cyclic chain used for the identification analysis, and a
//! generic tabular MDP.

pub mod alchemy;
pub mod chain;
pub mod tabular;
pub mod text;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::primitives::DiscreteAction;

pub use alchemy::{AlchemyEnv, AlchemyState, AlchemyTaskSpec, AdaptationTask, StartRule};
pub use chain::{ChainEnv, ChainTaskSpec};
pub use tabular::{TabularEnv, TabularMdp, TabularStart};
pub use text::TextObservation;

/// Episode length cap. An episode reaching it is truncated without a turn-in reward.
pub const MAX_HORIZON: usize = 30;

/// What an agent sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observation {
    Text(TextObservation),
    /// A bare state id (chain and other tabular environments).
    Discrete { id: usize },
}

impl Observation {
    /// Index of the underlying state.
    pub fn state_id(&self) -> usize {
        match self {
            Observation::Text(t) => t.underlying.index(),
            Observation::Discrete { id } => *id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    /// True end of episode (turn-in).
    pub terminal: bool,
    /// Horizon cap reached; not a modelled terminal.
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

/// Minimal single-agent environment interface.
pub trait Environment {
    fn n_actions(&self) -> usize;

    /// Start a new episode and return its first observation.
    fn reset(&mut self) -> Observation;

    /// Current observation (without advancing).
    fn observe(&self) -> Observation;

    fn step(&mut self, action: DiscreteAction) -> Result<StepOutcome>;

    /// Number of environment steps taken since construction.
    fn total_steps(&self) -> usize;
}
