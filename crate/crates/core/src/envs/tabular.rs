//! Finite MDPs given by explicit tables.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Environment, Observation, StepOutcome};
use crate::error::{Error, Result};
use crate::primitives::{DiscreteAction, RngStream};

/// Row-sum tolerance for transition tables.
pub const ROW_TOLERANCE: f64 = 1e-12;

/// Transition kernel, expected rewards and terminal probabilities, indexed by
/// `(state, action)` with 0-based state ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    kernel: Vec<f64>,
    rewards: Vec<f64>,
    terminal: Vec<f64>,
}

impl TabularMdp {
    /// `rows[s * n_actions + a]` is the next-state distribution of `(s, a)`.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        rows: Vec<Vec<f64>>,
        rewards: Vec<f64>,
        terminal: Vec<f64>,
    ) -> Result<Self> {
        let n_pairs = n_states * n_actions;
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("tabular MDP needs at least one state and action"));
        }
        if rows.len() != n_pairs || rewards.len() != n_pairs || terminal.len() != n_pairs {
            return Err(Error::DimensionMismatch {
                expected: n_pairs,
                got: rows.len().min(rewards.len()).min(terminal.len()),
            });
        }
        let mut kernel = Vec::with_capacity(n_pairs * n_states);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_states {
                return Err(Error::DimensionMismatch {
                    expected: n_states,
                    got: row.len(),
                });
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidDistribution(format!("row {i} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::InvalidDistribution(format!("row {i} sums to {sum}")));
            }
            kernel.extend_from_slice(row);
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("rewards".into()));
        }
        if terminal.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidDistribution("terminal probability outside [0, 1]".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            kernel,
            rewards,
            terminal,
        })
    }

    /// Deterministic MDP from a successor table `next[s * n_actions + a]`.
    pub fn deterministic(n_states: usize, n_actions: usize, next: &[usize], rewards: Vec<f64>, terminal: Vec<f64>) -> Result<Self> {
        let rows = next
            .iter()
            .map(|&n| {
                if n >= n_states {
                    return Err(Error::invalid(format!("successor {n} out of range")));
                }
                let mut row = vec![0.0; n_states];
                row[n] = 1.0;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(n_states, n_actions, rows, rewards, terminal)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn pair(&self, s: usize, a: usize) -> Result<usize> {
        if s >= self.n_states {
            return Err(Error::invalid(format!("state {s} out of range for {} states", self.n_states)));
        }
        DiscreteAction::checked(a, self.n_actions)?;
        Ok(s * self.n_actions + a)
    }

    pub fn row(&self, s: usize, a: usize) -> Result<&[f64]> {
        let i = self.pair(s, a)?;
        Ok(&self.kernel[i * self.n_states..(i + 1) * self.n_states])
    }

    pub fn reward(&self, s: usize, a: usize) -> Result<f64> {
        Ok(self.rewards[self.pair(s, a)?])
    }

    pub fn terminal_prob(&self, s: usize, a: usize) -> Result<f64> {
        Ok(self.terminal[self.pair(s, a)?])
    }

    /// Most likely successor, lowest id on ties.
    pub fn argmax_next(&self, s: usize, a: usize) -> Result<usize> {
        let row = self.row(s, a)?;
        let mut best = 0;
        for (i, p) in row.iter().enumerate() {
            if *p > row[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Result<usize> {
        let row = self.row(s, a)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in row.iter().enumerate() {
            if *p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return Ok(i);
                }
            }
        }
        Ok(last)
    }
}

/// How a [`TabularEnv`] picks its first state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TabularStart {
    Uniform,
    Fixed(usize),
}

/// Episode runner over a [`TabularMdp`] with discrete observations.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: TabularMdp,
    start: TabularStart,
    horizon: Option<usize>,
    state: usize,
    steps_in_episode: usize,
    total_steps: usize,
    rng: ChaCha8Rng,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp, start: TabularStart, stream: RngStream) -> Result<Self> {
        if let TabularStart::Fixed(s) = start {
            if s >= mdp.n_states() {
                return Err(Error::invalid(format!("start state {s} out of range")));
            }
        }
        let mut env = Self {
            mdp,
            start,
            horizon: None,
            state: 0,
            steps_in_episode: 0,
            total_steps: 0,
            rng: stream.generator(),
        };
        env.reset();
        Ok(env)
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = Some(horizon.max(1));
        self
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

impl Environment for TabularEnv {
    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn reset(&mut self) -> Observation {
        self.state = match self.start {
            TabularStart::Fixed(s) => s,
            TabularStart::Uniform => self.rng.gen_range(0..self.mdp.n_states()),
        };
        self.steps_in_episode = 0;
        self.observe()
    }

    fn observe(&self) -> Observation {
        Observation::Discrete { id: self.state }
    }

    fn step(&mut self, action: DiscreteAction) -> Result<StepOutcome> {
        let a = action.index();
        let next = self.mdp.sample_next(self.state, a, &mut self.rng)?;
        let reward = self.mdp.reward(self.state, a)?;
        let p_term = self.mdp.terminal_prob(self.state, a)?;
        let terminal = p_term >= 1.0 || (p_term > 0.0 && self.rng.gen::<f64>() < p_term);
        self.state = next;
        self.steps_in_episode += 1;
        self.total_steps += 1;
        let truncated = !terminal && self.horizon.is_some_and(|h| self.steps_in_episode >= h);
        Ok(StepOutcome {
            observation: self.observe(),
            reward,
            terminal,
            truncated,
        })
    }

    fn total_steps(&self) -> usize {
        self.total_steps
    }
}
