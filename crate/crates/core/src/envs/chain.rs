//! The cyclic chain: `left` moves back one state deterministically, `right`
//! moves forward with a state-dependent success probability. Two instances
//! that differ only at one informative state make a clean identification
//! problem.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::tabular::TabularMdp;
use crate::envs::{Environment, Observation, StepOutcome};
use crate::error::{Error, Result};
use crate::primitives::{DiscreteAction, RngStream};

pub const LEFT: DiscreteAction = DiscreteAction(0);
pub const RIGHT: DiscreteAction = DiscreteAction(1);

/// States are numbered `1..=n_states`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainTaskSpec {
    #[serde(default = "default_n_states")]
    pub n_states: usize,
    #[serde(default = "default_informative")]
    pub informative_state: usize,
    #[serde(default = "default_right_success")]
    pub right_success_default: f64,
    pub right_success_at_informative: f64,
    /// Offset added to `right_success_default` at each state (index `s - 1`);
    /// empty means no offsets. Ignored at the informative state.
    #[serde(default)]
    pub nuisance_perturbation: Vec<f64>,
}

fn default_n_states() -> usize {
    100
}

fn default_informative() -> usize {
    50
}

fn default_right_success() -> f64 {
    0.7
}

impl ChainTaskSpec {
    /// Right succeeds with 0.7 everywhere except 0.1 at the informative state.
    pub fn mdp1() -> Self {
        Self {
            n_states: 100,
            informative_state: 50,
            right_success_default: 0.7,
            right_success_at_informative: 0.1,
            nuisance_perturbation: Vec::new(),
        }
    }

    /// Right succeeds with 0.69 everywhere (a `-0.01` nuisance offset) except
    /// 0.9 at the informative state.
    pub fn mdp2() -> Self {
        Self::mdp2_with(0.9, -0.01)
    }

    pub fn mdp2_with(at_informative: f64, nuisance: f64) -> Self {
        Self {
            n_states: 100,
            informative_state: 50,
            right_success_default: 0.7,
            right_success_at_informative: at_informative,
            nuisance_perturbation: vec![nuisance; 100],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states < 2 {
            return Err(Error::invalid("chain needs at least 2 states"));
        }
        if !(1..=self.n_states).contains(&self.informative_state) {
            return Err(Error::invalid(format!(
                "informative state {} outside 1..={}",
                self.informative_state, self.n_states
            )));
        }
        if !self.nuisance_perturbation.is_empty() && self.nuisance_perturbation.len() != self.n_states {
            return Err(Error::DimensionMismatch {
                expected: self.n_states,
                got: self.nuisance_perturbation.len(),
            });
        }
        if self.nuisance_perturbation.iter().any(|d| d.abs() > 0.01 + 1e-12) {
            return Err(Error::invalid("nuisance perturbations must have magnitude at most 0.01"));
        }
        for s in 1..=self.n_states {
            let p = self.right_success(s);
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidDistribution(format!("right success {p} at state {s} not in (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn right_success(&self, s: usize) -> f64 {
        if s == self.informative_state {
            self.right_success_at_informative
        } else {
            self.right_success_default + self.nuisance_perturbation.get(s - 1).copied().unwrap_or(0.0)
        }
    }

    pub fn left_of(&self, s: usize) -> usize {
        if s == 1 {
            self.n_states
        } else {
            s - 1
        }
    }

    pub fn right_of(&self, s: usize) -> usize {
        if s == self.n_states {
            1
        } else {
            s + 1
        }
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if (1..=self.n_states).contains(&s) {
            Ok(())
        } else {
            Err(Error::invalid(format!("state {s} outside 1..={}", self.n_states)))
        }
    }

    /// Next-state distribution over 1-based states (entry `s' - 1`).
    pub fn transition_row(&self, s: usize, a: DiscreteAction) -> Result<Vec<f64>> {
        self.check_state(s)?;
        let mut row = vec![0.0; self.n_states];
        match DiscreteAction::checked(a.index(), 2)? {
            LEFT => row[self.left_of(s) - 1] = 1.0,
            _ => {
                let p = self.right_success(s);
                row[self.right_of(s) - 1] += p;
                row[s - 1] += 1.0 - p;
            }
        }
        Ok(row)
    }

    /// The chain as a 0-based tabular MDP (zero reward, never terminal).
    pub fn to_tabular(&self) -> Result<TabularMdp> {
        self.validate()?;
        let mut rows = Vec::with_capacity(self.n_states * 2);
        for s in 1..=self.n_states {
            for a in [LEFT, RIGHT] {
                rows.push(self.transition_row(s, a)?);
            }
        }
        let n = self.n_states * 2;
        TabularMdp::new(self.n_states, 2, rows, vec![0.0; n], vec![0.0; n])
    }
}

/// One chain transition from 1-based state `s`.
pub fn chain_step<R: Rng + ?Sized>(
    task: &ChainTaskSpec,
    s: usize,
    a: DiscreteAction,
    rng: &mut R,
) -> Result<(usize, f64, bool)> {
    task.check_state(s)?;
    let next = match DiscreteAction::checked(a.index(), 2)? {
        LEFT => task.left_of(s),
        _ => {
            if rng.gen::<f64>() < task.right_success(s) {
                task.right_of(s)
            } else {
                s
            }
        }
    };
    Ok((next, 0.0, false))
}

/// Chain episode runner; observations carry the 0-based id `s - 1`.
#[derive(Debug, Clone)]
pub struct ChainEnv {
    task: ChainTaskSpec,
    state: usize,
    total_steps: usize,
    rng: ChaCha8Rng,
}

impl ChainEnv {
    /// Starts at a uniformly drawn state.
    pub fn new(task: ChainTaskSpec, stream: RngStream) -> Result<Self> {
        task.validate()?;
        let mut env = Self {
            task,
            state: 1,
            total_steps: 0,
            rng: stream.generator(),
        };
        env.reset();
        Ok(env)
    }

    pub fn task(&self) -> &ChainTaskSpec {
        &self.task
    }

    /// Current 1-based state.
    pub fn state(&self) -> usize {
        self.state
    }
}

impl Environment for ChainEnv {
    fn n_actions(&self) -> usize {
        2
    }

    fn reset(&mut self) -> Observation {
        self.state = self.rng.gen_range(1..=self.task.n_states);
        self.observe()
    }

    fn observe(&self) -> Observation {
        Observation::Discrete { id: self.state - 1 }
    }

    fn step(&mut self, action: DiscreteAction) -> Result<StepOutcome> {
        let (next, reward, terminal) = chain_step(&self.task, self.state, action, &mut self.rng)?;
        self.state = next;
        self.total_steps += 1;
        Ok(StepOutcome {
            observation: self.observe(),
            reward,
            terminal,
            truncated: false,
        })
    }

    fn total_steps(&self) -> usize {
        self.total_steps
    }
}
