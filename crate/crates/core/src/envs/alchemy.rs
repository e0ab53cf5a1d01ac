//! Hypercube Alchemy: a stone with `n` binary traits, one potion per trait and
//! a turn-in action. Tasks differ in which `(state, potion)` pairs are blocked
//! and in how traits are valued.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::tabular::TabularMdp;
use crate::envs::text::{render_text, vocabulary};
use crate::envs::{Environment, Observation, StepOutcome, MAX_HORIZON};
use crate::error::{Error, Result};
use crate::primitives::{DiscreteAction, RngStream};

pub const DEFAULT_STEP_PENALTY: f64 = -0.05;
const WEIGHT_CHOICES: [f64; 4] = [-0.5, -0.25, 0.25, 0.5];

/// Binary trait vector, stored as a bit code (bit `i` = feature `i`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct AlchemyState {
    n_features: u8,
    code: u8,
}

impl AlchemyState {
    pub fn new(n_features: usize, code: usize) -> Result<Self> {
        if n_features == 0 || n_features > 7 {
            return Err(Error::invalid(format!("unsupported feature count {n_features}")));
        }
        if code >= 1 << n_features {
            return Err(Error::invalid(format!("state code {code} out of range for {n_features} features")));
        }
        Ok(Self {
            n_features: n_features as u8,
            code: code as u8,
        })
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        let mut code = 0usize;
        for (i, b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => code |= 1 << i,
                other => return Err(Error::invalid(format!("bit {i} has value {other}"))),
            }
        }
        Self::new(bits.len(), code)
    }

    pub fn n_features(&self) -> usize {
        self.n_features as usize
    }

    pub fn index(&self) -> usize {
        self.code as usize
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.code >> i) & 1 == 1
    }

    pub fn bits(&self) -> Vec<u8> {
        (0..self.n_features()).map(|i| u8::from(self.bit(i))).collect()
    }

    pub fn toggled(&self, feature: usize) -> Self {
        Self {
            n_features: self.n_features,
            code: self.code ^ (1 << feature),
        }
    }

    pub fn all(n_features: usize) -> impl Iterator<Item = AlchemyState> {
        (0..1usize << n_features).map(move |c| AlchemyState {
            n_features: n_features as u8,
            code: c as u8,
        })
    }
}

impl TryFrom<Vec<u8>> for AlchemyState {
    type Error = Error;

    fn try_from(bits: Vec<u8>) -> Result<Self> {
        Self::from_bits(&bits)
    }
}

impl From<AlchemyState> for Vec<u8> {
    fn from(s: AlchemyState) -> Vec<u8> {
        s.bits()
    }
}

/// One Alchemy task: blocked transitions plus per-trait reward weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaskSpecFile", into = "TaskSpecFile")]
pub struct AlchemyTaskSpec {
    pub n_features: usize,
    /// `(state code, potion)` pairs whose potion leaves the state unchanged.
    pub blocked: BTreeSet<(usize, usize)>,
    pub trait_weights: Vec<f64>,
    pub step_penalty: f64,
    pub task_id: usize,
    pub seed: u64,
}

/// On-disk layout of a task spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskSpecFile {
    #[serde(default)]
    task_id: usize,
    n_features: usize,
    blocked: Vec<(Vec<u8>, usize)>,
    trait_weights: Vec<f64>,
    #[serde(default = "default_penalty")]
    step_penalty: f64,
    #[serde(default)]
    seed: u64,
}

fn default_penalty() -> f64 {
    DEFAULT_STEP_PENALTY
}

impl TryFrom<TaskSpecFile> for AlchemyTaskSpec {
    type Error = Error;

    fn try_from(f: TaskSpecFile) -> Result<Self> {
        let mut blocked = BTreeSet::new();
        for (bits, potion) in f.blocked {
            if bits.len() != f.n_features {
                return Err(Error::invalid(format!(
                    "blocked state has {} bits, task has {} features",
                    bits.len(),
                    f.n_features
                )));
            }
            blocked.insert((AlchemyState::from_bits(&bits)?.index(), potion));
        }
        let spec = AlchemyTaskSpec {
            n_features: f.n_features,
            blocked,
            trait_weights: f.trait_weights,
            step_penalty: f.step_penalty,
            task_id: f.task_id,
            seed: f.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<AlchemyTaskSpec> for TaskSpecFile {
    fn from(s: AlchemyTaskSpec) -> Self {
        TaskSpecFile {
            task_id: s.task_id,
            n_features: s.n_features,
            blocked: s
                .blocked
                .iter()
                .map(|&(code, p)| {
                    let st = AlchemyState::new(s.n_features, code).expect("validated state");
                    (st.bits(), p)
                })
                .collect(),
            trait_weights: s.trait_weights,
            step_penalty: s.step_penalty,
            seed: s.seed,
        }
    }
}

impl AlchemyTaskSpec {
    /// An unblocked task.
    pub fn open(n_features: usize, trait_weights: Vec<f64>, task_id: usize) -> Result<Self> {
        let spec = Self {
            n_features,
            blocked: BTreeSet::new(),
            trait_weights,
            step_penalty: DEFAULT_STEP_PENALTY,
            task_id,
            seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.n_features > vocabulary().max_features() {
            return Err(Error::invalid(format!("unsupported feature count {}", self.n_features)));
        }
        if self.trait_weights.len() != self.n_features {
            return Err(Error::invalid(format!(
                "{} trait weights for {} features",
                self.trait_weights.len(),
                self.n_features
            )));
        }
        if self.trait_weights.iter().any(|w| !w.is_finite()) || self.trait_weights.iter().all(|w| *w == 0.0) {
            return Err(Error::invalid("trait weights must be finite and not all zero"));
        }
        for &(code, potion) in &self.blocked {
            if code >= self.n_states() || potion >= self.n_features {
                return Err(Error::invalid(format!("blocked pair ({code}, {potion}) out of range")));
            }
        }
        if !self.step_penalty.is_finite() || self.step_penalty > 0.0 {
            return Err(Error::invalid("step penalty must be finite and non-positive"));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        1 << self.n_features
    }

    pub fn n_actions(&self) -> usize {
        self.n_features + 1
    }

    pub fn turn_in(&self) -> DiscreteAction {
        DiscreteAction(self.n_features)
    }

    pub fn is_blocked(&self, state: &AlchemyState, potion: usize) -> bool {
        self.blocked.contains(&(state.index(), potion))
    }

    /// Value of turning in `state`; spans exactly `[-1, 1]` over the cube.
    pub fn value(&self, state: &AlchemyState) -> f64 {
        let total: f64 = self.trait_weights.iter().map(|w| w.abs()).sum();
        self.trait_weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let agrees = state.bit(i) == (*w > 0.0);
                let sign = if agrees { 1.0 } else { -1.0 };
                sign * w.abs() / total
            })
            .sum()
    }

    pub fn best_state(&self) -> AlchemyState {
        let code = self
            .trait_weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .fold(0usize, |c, (i, _)| c | (1 << i));
        AlchemyState::new(self.n_features, code).expect("in range")
    }

    pub fn state(&self, code: usize) -> Result<AlchemyState> {
        AlchemyState::new(self.n_features, code)
    }

    /// The task as an explicit tabular MDP over state codes.
    pub fn to_tabular(&self) -> Result<TabularMdp> {
        let n = self.n_states();
        let n_actions = self.n_actions();
        let mut next = Vec::with_capacity(n * n_actions);
        let mut rewards = Vec::with_capacity(n * n_actions);
        let mut terminal = Vec::with_capacity(n * n_actions);
        for s in AlchemyState::all(self.n_features) {
            for a in 0..n_actions {
                let (succ, r, term) = alchemy_step(self, &s, DiscreteAction(a))?;
                next.push(succ.index());
                rewards.push(r);
                terminal.push(if term { 1.0 } else { 0.0 });
            }
        }
        TabularMdp::deterministic(n, n_actions, &next, rewards, terminal)
    }

    /// Deterministic successor of `state` under `action` (turn-in keeps the state).
    pub fn successor(&self, state: &AlchemyState, action: DiscreteAction) -> AlchemyState {
        let a = action.index();
        if a >= self.n_features || self.is_blocked(state, a) {
            *state
        } else {
            state.toggled(a)
        }
    }
}

/// Apply `action` to `state`: potions toggle their trait unless blocked and
/// cost `step_penalty`; turn-in pays the state value and ends the episode.
pub fn alchemy_step(
    task: &AlchemyTaskSpec,
    state: &AlchemyState,
    action: DiscreteAction,
) -> Result<(AlchemyState, f64, bool)> {
    let a = DiscreteAction::checked(action.index(), task.n_actions())?.index();
    if state.n_features() != task.n_features {
        return Err(Error::DimensionMismatch {
            expected: task.n_features,
            got: state.n_features(),
        });
    }
    if a == task.n_features {
        return Ok((*state, task.value(state), true));
    }
    Ok((task.successor(state, action), task.step_penalty, false))
}

/// Number of blocked pairs per meta-training task: 2 for the 3D cube, 4 for 4D.
pub fn meta_block_count(n_features: usize) -> Result<usize> {
    match n_features {
        3 => Ok(2),
        4 => Ok(4),
        n => Err(Error::invalid(format!("meta-task sampling supports 3 or 4 features, got {n}"))),
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Sample `n_tasks` tasks with pairwise-distinct blocked sets and random trait weights.
pub fn sample_meta_tasks(n_tasks: usize, n_features: usize, stream: RngStream) -> Result<Vec<AlchemyTaskSpec>> {
    if n_tasks == 0 {
        return Err(Error::invalid("n_tasks must be at least 1"));
    }
    let n_blocked = meta_block_count(n_features)?;
    let n_pairs = (1usize << n_features) * n_features;
    if n_tasks as f64 > binomial(n_pairs, n_blocked) {
        return Err(Error::invalid(format!(
            "cannot draw {n_tasks} distinct blocked sets of size {n_blocked} from {n_pairs} pairs"
        )));
    }
    let mut rng = stream.generator();
    let mut tasks: Vec<AlchemyTaskSpec> = Vec::with_capacity(n_tasks);
    while tasks.len() < n_tasks {
        let blocked: BTreeSet<(usize, usize)> = sample(&mut rng, n_pairs, n_blocked)
            .into_iter()
            .map(|i| (i / n_features, i % n_features))
            .collect();
        if tasks.iter().any(|t| t.blocked == blocked) {
            continue;
        }
        let trait_weights = (0..n_features)
            .map(|_| WEIGHT_CHOICES[rng.gen_range(0..WEIGHT_CHOICES.len())])
            .collect();
        tasks.push(AlchemyTaskSpec {
            n_features,
            blocked,
            trait_weights,
            step_penalty: DEFAULT_STEP_PENALTY,
            task_id: tasks.len(),
            seed: rng.gen(),
        });
    }
    Ok(tasks)
}

/// An unseen task built from a training task, with its ground-truth closest model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTask {
    pub task: AlchemyTaskSpec,
    pub closest_task_id: usize,
    pub extra_block: (usize, usize),
}

/// Block one more uniformly chosen `(state, potion)` pair of `base`.
pub fn derive_adaptation_task(base: &AlchemyTaskSpec, stream: RngStream) -> Result<AdaptationTask> {
    let free: Vec<(usize, usize)> = (0..base.n_states())
        .flat_map(|s| (0..base.n_features).map(move |p| (s, p)))
        .filter(|pair| !base.blocked.contains(pair))
        .collect();
    if free.is_empty() {
        return Err(Error::invalid("task has no unblocked transitions left"));
    }
    let mut rng = stream.generator();
    let extra = free[rng.gen_range(0..free.len())];
    let mut task = base.clone();
    task.blocked.insert(extra);
    task.seed = rng.gen();
    Ok(AdaptationTask {
        task,
        closest_task_id: base.task_id,
        extra_block: extra,
    })
}

/// Shortest blocked-aware path lengths from `s0` to every state.
pub fn shortest_paths(task: &AlchemyTaskSpec, s0: &AlchemyState) -> Vec<Option<usize>> {
    let mut dist = vec![None; task.n_states()];
    let mut queue = VecDeque::new();
    dist[s0.index()] = Some(0);
    queue.push_back(*s0);
    while let Some(s) = queue.pop_front() {
        let d = dist[s.index()].expect("visited");
        for p in 0..task.n_features {
            let next = task.successor(&s, DiscreteAction(p));
            if dist[next.index()].is_none() {
                dist[next.index()] = Some(d + 1);
                queue.push_back(next);
            }
        }
    }
    dist
}

/// Best achievable episodic return from `s0` within the horizon cap.
pub fn optimal_return(task: &AlchemyTaskSpec, s0: &AlchemyState) -> f64 {
    shortest_paths(task, s0)
        .into_iter()
        .enumerate()
        .filter_map(|(code, d)| {
            let d = d?;
            // potions plus the final turn-in must fit in the horizon
            (d < MAX_HORIZON).then(|| {
                let s = AlchemyState::new(task.n_features, code).expect("in range");
                task.value(&s) + task.step_penalty * d as f64
            })
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// How episodes pick their first state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartRule {
    /// Uniform over states whose optimal return is positive.
    Uniform,
    Fixed(AlchemyState),
}

/// Stateful Alchemy episode runner with text observations.
#[derive(Debug, Clone)]
pub struct AlchemyEnv {
    task: AlchemyTaskSpec,
    start: StartRule,
    horizon: usize,
    state: AlchemyState,
    current: Observation,
    steps_in_episode: usize,
    total_steps: usize,
    done: bool,
    rng: ChaCha8Rng,
    render_stream: RngStream,
    renders: u64,
}

impl AlchemyEnv {
    pub fn new(task: AlchemyTaskSpec, start: StartRule, stream: RngStream) -> Result<Self> {
        task.validate()?;
        let state = AlchemyState::new(task.n_features, 0)?;
        let render_stream = stream.derive(crate::primitives::streams::RENDER);
        let mut env = Self {
            current: Observation::Discrete { id: 0 },
            task,
            start,
            horizon: MAX_HORIZON,
            state,
            steps_in_episode: 0,
            total_steps: 0,
            done: true,
            rng: stream.generator(),
            render_stream,
            renders: 0,
        };
        env.reset();
        Ok(env)
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon.max(1);
        self
    }

    pub fn task(&self) -> &AlchemyTaskSpec {
        &self.task
    }

    pub fn state(&self) -> AlchemyState {
        self.state
    }

    fn render(&mut self) -> Observation {
        let obs = render_text(&self.state, self.render_stream.derive(self.renders));
        self.renders += 1;
        Observation::Text(obs)
    }

    fn pick_start(&mut self) -> AlchemyState {
        match self.start {
            StartRule::Fixed(s) => s,
            StartRule::Uniform => {
                let candidates: Vec<AlchemyState> = AlchemyState::all(self.task.n_features)
                    .filter(|s| optimal_return(&self.task, s) > 0.0)
                    .collect();
                if candidates.is_empty() {
                    let n = self.task.n_states();
                    AlchemyState::new(self.task.n_features, self.rng.gen_range(0..n)).expect("in range")
                } else {
                    candidates[self.rng.gen_range(0..candidates.len())]
                }
            }
        }
    }
}

impl Environment for AlchemyEnv {
    fn n_actions(&self) -> usize {
        self.task.n_actions()
    }

    fn reset(&mut self) -> Observation {
        self.state = self.pick_start();
        self.steps_in_episode = 0;
        self.done = false;
        self.current = self.render();
        self.current.clone()
    }

    fn observe(&self) -> Observation {
        self.current.clone()
    }

    fn step(&mut self, action: DiscreteAction) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::invalid("episode finished; call reset()"));
        }
        let (next, reward, terminal) = alchemy_step(&self.task, &self.state, action)?;
        self.state = next;
        self.steps_in_episode += 1;
        self.total_steps += 1;
        let truncated = !terminal && self.steps_in_episode >= self.horizon;
        self.done = terminal || truncated;
        self.current = self.render();
        Ok(StepOutcome {
            observation: self.current.clone(),
            reward,
            terminal,
            truncated,
        })
    }

    fn total_steps(&self) -> usize {
        self.total_steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::text::decode_text;

    fn st(bits: &[u8]) -> AlchemyState {
        AlchemyState::from_bits(bits).unwrap()
    }

    fn open3() -> AlchemyTaskSpec {
        AlchemyTaskSpec::open(3, vec![0.5, 0.25, -0.25], 0).unwrap()
    }

    #[test]
    fn potion_toggles_one_trait() {
        let (next, r, term) = alchemy_step(&open3(), &st(&[0, 0, 0]), DiscreteAction(1)).unwrap();
        assert_eq!(next, st(&[0, 1, 0]));
        assert_eq!(r, -0.05);
        assert!(!term);
    }

    #[test]
    fn blocked_potion_keeps_state() {
        let mut task = open3();
        task.blocked.insert((st(&[0, 0, 0]).index(), 1));
        let (next, r, term) = alchemy_step(&task, &st(&[0, 0, 0]), DiscreteAction(1)).unwrap();
        assert_eq!(next, st(&[0, 0, 0]));
        assert_eq!(r, -0.05);
        assert!(!term);
        // only that action is absorbing
        let (next, _, _) = alchemy_step(&task, &st(&[0, 0, 0]), DiscreteAction(0)).unwrap();
        assert_eq!(next, st(&[1, 0, 0]));
    }

    #[test]
    fn turn_in_pays_value_and_ends() {
        let task = open3();
        let best = task.best_state();
        assert_eq!(task.value(&best), 1.0);
        let (next, r, term) = alchemy_step(&task, &best, task.turn_in()).unwrap();
        assert_eq!(next, best);
        assert_eq!(r, 1.0);
        assert!(term);
    }

    #[test]
    fn out_of_range_action_is_error() {
        assert!(matches!(
            alchemy_step(&open3(), &st(&[0, 0, 0]), DiscreteAction(4)),
            Err(Error::ActionOutOfRange { .. })
        ));
    }

    #[test]
    fn state_space_and_value_range() {
        for n in [3usize, 4] {
            let tasks = sample_meta_tasks(6, n, RngStream::new(9, 1)).unwrap();
            for t in &tasks {
                assert_eq!(AlchemyState::all(n).count(), 1 << n);
                assert_eq!(t.n_actions(), n + 1);
                let values: Vec<f64> = AlchemyState::all(n).map(|s| t.value(&s)).collect();
                let max = values.iter().cloned().fold(f64::MIN, f64::max);
                let min = values.iter().cloned().fold(f64::MAX, f64::min);
                assert!((max - 1.0).abs() < 1e-12 && (min + 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn meta_tasks_have_fixed_block_counts_and_are_distinct() {
        let tasks = sample_meta_tasks(6, 3, RngStream::new(1, 2)).unwrap();
        assert_eq!(tasks.len(), 6);
        for (i, t) in tasks.iter().enumerate() {
            assert_eq!(t.blocked.len(), 2);
            assert_eq!(t.task_id, i);
            for u in &tasks[..i] {
                assert_ne!(t.blocked, u.blocked);
            }
        }
        let four = sample_meta_tasks(6, 4, RngStream::new(1, 2)).unwrap();
        assert!(four.iter().all(|t| t.blocked.len() == 4));
        assert_eq!(sample_meta_tasks(1, 3, RngStream::new(1, 2)).unwrap().len(), 1);
        assert_eq!(tasks, sample_meta_tasks(6, 3, RngStream::new(1, 2)).unwrap());
    }

    #[test]
    fn impossible_distinctness_is_error() {
        assert!(sample_meta_tasks(277, 3, RngStream::new(0, 0)).is_err());
        assert!(sample_meta_tasks(0, 3, RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn adaptation_task_adds_one_block() {
        let tasks = sample_meta_tasks(6, 3, RngStream::new(4, 4)).unwrap();
        let derived = derive_adaptation_task(&tasks[2], RngStream::new(4, 5)).unwrap();
        assert_eq!(derived.task.blocked.len(), 3);
        assert!(derived.task.blocked.is_superset(&tasks[2].blocked));
        assert_eq!(derived.closest_task_id, 2);
        for t in &tasks {
            assert_ne!(t.blocked, derived.task.blocked);
        }
        assert_eq!(derived.task.trait_weights, tasks[2].trait_weights);
    }

    #[test]
    fn fully_blocked_task_cannot_be_derived() {
        let mut task = AlchemyTaskSpec::open(1, vec![1.0], 0).unwrap();
        task.blocked.insert((0, 0));
        task.blocked.insert((1, 0));
        assert!(derive_adaptation_task(&task, RngStream::new(0, 0)).is_err());
    }

    /// Brute force over every action path of length ≤ `depth` ending in a turn-in.
    fn brute_force_return(task: &AlchemyTaskSpec, s0: &AlchemyState, depth: usize) -> f64 {
        fn go(task: &AlchemyTaskSpec, s: AlchemyState, left: usize, acc: f64, best: &mut f64) {
            let (_, r, _) = alchemy_step(task, &s, task.turn_in()).unwrap();
            *best = best.max(acc + r);
            if left == 0 {
                return;
            }
            for p in 0..task.n_features {
                let (n, r, _) = alchemy_step(task, &s, DiscreteAction(p)).unwrap();
                go(task, n, left - 1, acc + r, best);
            }
        }
        let mut best = f64::NEG_INFINITY;
        go(task, *s0, depth, 0.0, &mut best);
        best
    }

    #[test]
    fn optimal_return_immediate_turn_in() {
        let task = open3();
        assert_eq!(optimal_return(&task, &task.best_state()), 1.0);
    }

    #[test]
    fn optimal_return_matches_brute_force() {
        let task = open3();
        let worst = AlchemyState::new(3, task.best_state().index() ^ 0b111).unwrap();
        let expected = brute_force_return(&task, &worst, 8);
        assert!((expected - (1.0 - 3.0 * 0.05)).abs() < 1e-12);
        assert!((optimal_return(&task, &worst) - expected).abs() < 1e-12);

        for t in sample_meta_tasks(6, 3, RngStream::new(77, 0)).unwrap() {
            for s in AlchemyState::all(3) {
                let bf = brute_force_return(&t, &s, 8);
                assert!((optimal_return(&t, &s) - bf).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blocking_never_increases_optimal_return() {
        let task = open3();
        let best = task.best_state();
        let worst = AlchemyState::new(3, best.index() ^ 0b111).unwrap();
        let base = optimal_return(&task, &worst);
        for p in 0..3 {
            let mut blocked = task.clone();
            blocked.blocked.insert((worst.index(), p));
            let r = optimal_return(&blocked, &worst);
            assert!(r <= base + 1e-12);
            assert!((r - brute_force_return(&blocked, &worst, 8)).abs() < 1e-12);
        }
    }

    #[test]
    fn task_spec_json_round_trip() {
        let tasks = sample_meta_tasks(3, 4, RngStream::new(5, 5)).unwrap();
        let json = serde_json::to_string(&tasks).unwrap();
        let back: Vec<AlchemyTaskSpec> = serde_json::from_str(&json).unwrap();
        assert_eq!(tasks, back);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v[0]["blocked"][0][0].is_array());
    }

    #[test]
    fn env_episode_mechanics() {
        let task = open3();
        let start = AlchemyState::new(3, task.best_state().index() ^ 0b001).unwrap();
        let mut env = AlchemyEnv::new(task.clone(), StartRule::Fixed(start), RngStream::new(1, 1)).unwrap();
        let obs = env.observe();
        match &obs {
            Observation::Text(t) => assert_eq!(decode_text(&t.text, 3).unwrap(), start),
            _ => panic!("alchemy observations are text"),
        }
        let out = env.step(DiscreteAction(0)).unwrap();
        assert_eq!(out.observation.state_id(), task.best_state().index());
        let out = env.step(task.turn_in()).unwrap();
        assert!(out.terminal);
        assert_eq!(out.reward, 1.0);
        assert!(env.step(DiscreteAction(0)).is_err());
        env.reset();
        for i in 0..MAX_HORIZON {
            let out = env.step(DiscreteAction(0)).unwrap();
            assert_eq!(out.truncated, i + 1 == MAX_HORIZON);
            assert!(!out.terminal);
            assert_eq!(out.reward, -0.05);
        }
        assert_eq!(env.total_steps(), 2 + MAX_HORIZON);
    }
}
