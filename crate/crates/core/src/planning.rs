//! Experiment planning, model selection and the MPC actor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{select_model, FitMetric, HypothesisModel, ModelPool, TERMINAL_THRESHOLD};
use crate::encoder::Encoder;
use crate::envs::{Environment, StepOutcome};
use crate::primitives::{squared_distance, ActionSequence, DiscreteAction, ExperienceBuffer, LatentPoint, TransitionRecord};
use crate::separation::{SeparationConfig, SeparationFunction, Separator};
use crate::trie::ActionTrie;
use crate::{Error, Result};

/// How random candidate sequences are drawn when enumeration is too large.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CandidateSampler {
    /// Every action independently uniform.
    Uniform,
    /// Repeat the previous action with probability `repeat`, otherwise draw
    /// uniformly. Reaches distant states in long sequences far more often.
    Sticky { repeat: f64 },
}

impl CandidateSampler {
    pub fn validate(&self) -> Result<()> {
        if let CandidateSampler::Sticky { repeat } = self {
            if !(0.0..=1.0).contains(repeat) {
                return Err(Error::config("planner.sampler.repeat", format!("must lie in [0, 1], got {repeat}")));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, len: usize, n_actions: usize, rng: &mut R) -> Vec<DiscreteAction> {
        let mut out: Vec<DiscreteAction> = Vec::with_capacity(len);
        for _ in 0..len {
            let a = match (self, out.last()) {
                (CandidateSampler::Sticky { repeat }, Some(&prev)) if rng.gen_bool(*repeat) => prev,
                _ => DiscreteAction(rng.gen_range(0..n_actions)),
            };
            out.push(a);
        }
        out
    }
}

fn default_n_candidates() -> usize {
    2000
}

fn default_true() -> bool {
    true
}

fn default_sampler() -> CandidateSampler {
    CandidateSampler::Uniform
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub k: usize,
    #[serde(default = "default_n_candidates")]
    pub n_candidates: usize,
    pub separation: SeparationConfig,
    /// Re-plan after every executed action, over the models still consistent
    /// with the evidence.
    #[serde(default = "default_true")]
    pub replan: bool,
    /// A model stays plausible while its summed squared error is within this
    /// much of the best model's; `None` means `tol²`.
    #[serde(default)]
    pub plausible_slack: Option<f64>,
    #[serde(default = "default_sampler")]
    pub sampler: CandidateSampler,
}

impl PlannerConfig {
    pub fn new(k: usize, function: SeparationFunction) -> Self {
        Self {
            k,
            n_candidates: default_n_candidates(),
            separation: SeparationConfig::new(function),
            replan: true,
            plausible_slack: None,
            sampler: CandidateSampler::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("planner.k", "must be at least 1"));
        }
        if self.n_candidates == 0 {
            return Err(Error::config("planner.n_candidates", "must be at least 1"));
        }
        if let Some(s) = self.plausible_slack {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::config("planner.plausible_slack", format!("must be non-negative, got {s}")));
            }
        }
        self.sampler.validate()?;
        self.separation.validate()
    }
}

/// `n_actions^len` if it fits in `limit`.
fn enumeration_size(n_actions: usize, len: usize, limit: usize) -> Option<usize> {
    let mut total: usize = 1;
    for _ in 0..len {
        total = total.checked_mul(n_actions)?;
        if total > limit {
            return None;
        }
    }
    Some(total)
}

/// All sequences of length `len` in lexicographic order, or `n` sampled ones
/// when there are more than `n`.
pub fn candidate_sequences<R: Rng + ?Sized>(
    n_actions: usize,
    len: usize,
    n: usize,
    sampler: CandidateSampler,
    rng: &mut R,
) -> Vec<Vec<DiscreteAction>> {
    match enumeration_size(n_actions, len, n) {
        Some(total) => (0..total)
            .map(|mut i| {
                let mut seq = vec![DiscreteAction(0); len];
                for slot in seq.iter_mut().rev() {
                    *slot = DiscreteAction(i % n_actions);
                    i /= n_actions;
                }
                seq
            })
            .collect(),
        None => (0..n).map(|_| sampler.sample(len, n_actions, rng)).collect(),
    }
}

/// Index of the maximum; earliest on ties.
fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedExperiment {
    pub sequence: ActionSequence,
    pub score: f64,
    /// The pool could not be told apart by any candidate.
    pub degenerate: bool,
    pub n_candidates: usize,
}

/// Choose the length-`cfg.k` sequence that best separates the pool from `z0`.
pub fn plan_experiment<M: HypothesisModel, R: Rng + ?Sized>(
    pool: &ModelPool<M>,
    z0: &LatentPoint,
    cfg: &PlannerConfig,
    rng: &mut R,
) -> Result<PlannedExperiment> {
    cfg.validate()?;
    let separator = Separator::new(&cfg.separation, pool)?;
    plan_with(pool, &separator, z0, cfg.k, cfg, rng)
}

fn plan_with<M: HypothesisModel, R: Rng + ?Sized>(
    pool: &ModelPool<M>,
    separator: &Separator,
    z0: &LatentPoint,
    len: usize,
    cfg: &PlannerConfig,
    rng: &mut R,
) -> Result<PlannedExperiment> {
    let candidates = candidate_sequences(pool.n_actions(), len, cfg.n_candidates, cfg.sampler, rng);
    let refs: Vec<&[DiscreteAction]> = candidates.iter().map(|c| c.as_slice()).collect();
    let scores = separator.score_candidates(pool, &refs, z0)?;
    let best = argmax_first(&scores);
    Ok(PlannedExperiment {
        sequence: ActionSequence::new(candidates[best].clone(), len)?,
        score: scores[best],
        degenerate: scores[best] == 0.0,
        n_candidates: candidates.len(),
    })
}

/// Take one action and record the encoded transition.
pub fn step_and_record<E: Environment + ?Sized>(
    env: &mut E,
    encoder: &Encoder,
    action: DiscreteAction,
) -> Result<(TransitionRecord, StepOutcome)> {
    let state = env.observe();
    let encoded_state = encoder.encode(&state)?;
    let outcome = env.step(action)?;
    let encoded_next = encoder.encode(&outcome.observation)?;
    let record = TransitionRecord {
        state,
        action,
        reward: outcome.reward,
        next_state: outcome.observation.clone(),
        terminal: outcome.terminal,
        encoded_state,
        encoded_next,
    };
    Ok((record, outcome))
}

/// Execute `sigma` from the environment's current state, stopping when the
/// episode ends.
pub fn run_experiment<E: Environment + ?Sized>(env: &mut E, sigma: &[DiscreteAction], encoder: &Encoder) -> Result<ExperienceBuffer> {
    let mut buffer = ExperienceBuffer::new();
    for &a in sigma {
        let (record, outcome) = step_and_record(env, encoder, a)?;
        buffer.push(record)?;
        if outcome.done() {
            break;
        }
    }
    Ok(buffer)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub model_id: usize,
    pub buffer: ExperienceBuffer,
    /// Actions actually executed.
    pub executed: Vec<DiscreteAction>,
    /// The first plan found no separating candidate.
    pub degenerate: bool,
}

/// Summed squared latent error of every model on `buffer`, in pool order.
fn summed_errors<M: HypothesisModel>(pool: &ModelPool<M>, buffer: &ExperienceBuffer) -> Result<Vec<f64>> {
    let zs: Vec<&LatentPoint> = buffer.iter().map(|r| &r.encoded_state).collect();
    let actions: Vec<DiscreteAction> = buffer.iter().map(|r| r.action).collect();
    pool.models()
        .iter()
        .map(|m| {
            let preds = m.predict_points(&zs, &actions)?;
            preds
                .iter()
                .zip(buffer.iter())
                .map(|(p, r)| squared_distance(&p.next, &r.encoded_next))
                .sum()
        })
        .collect()
}

/// Positions of the models whose summed error is within `slack` of the best.
pub fn plausible_models<M: HypothesisModel>(pool: &ModelPool<M>, buffer: &ExperienceBuffer, slack: f64) -> Result<Vec<usize>> {
    if buffer.is_empty() {
        return Ok((0..pool.len()).collect());
    }
    let errors = summed_errors(pool, buffer)?;
    let best = errors.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(errors
        .iter()
        .enumerate()
        .filter(|(_, e)| **e <= best + slack)
        .map(|(i, _)| i)
        .collect())
}

/// Plan an experiment, run it and adopt the best-fitting model.
///
/// With `cfg.replan`, only the first planned action is executed at a time:
/// the plan is recomputed from the new state over the still-plausible models
/// (the whole pool when they cannot be separated), and a finished episode is
/// reset until `cfg.k` steps are spent. Otherwise the single plan is executed
/// verbatim, stopping at the end of the episode.
pub fn hype_select<M, E, R>(pool: &ModelPool<M>, env: &mut E, cfg: &PlannerConfig, metric: FitMetric, rng: &mut R) -> Result<Selection>
where
    M: HypothesisModel + Clone,
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let encoder = pool.encoder().clone();
    let separator = Separator::new(&cfg.separation, pool)?;
    if !cfg.replan {
        let z0 = encoder.encode(&env.observe())?;
        let plan = plan_with(pool, &separator, &z0, cfg.k, cfg, rng)?;
        let buffer = run_experiment(env, plan.sequence.actions(), &encoder)?;
        let executed = buffer.iter().map(|r| r.action).collect();
        return Ok(Selection {
            model_id: select_model(pool, &buffer, metric)?,
            buffer,
            executed,
            degenerate: plan.degenerate,
        });
    }

    let slack = cfg.plausible_slack.unwrap_or_else(|| separator.tol().powi(2));
    let mut buffer = ExperienceBuffer::new();
    let mut degenerate = None;
    for used in 0..cfg.k {
        let z = encoder.encode(&env.observe())?;
        let remaining = cfg.k - used;
        let plausible = plausible_models(pool, &buffer, slack)?;
        let mut plan = None;
        if plausible.len() > 1 {
            let subset = pool.subset(&plausible)?;
            let p = plan_with(&subset, &Separator::new(&cfg.separation, &subset)?, &z, remaining, cfg, rng)?;
            if !p.degenerate {
                plan = Some(p);
            }
        }
        let plan = match plan {
            Some(p) => p,
            None => plan_with(pool, &separator, &z, remaining, cfg, rng)?,
        };
        degenerate.get_or_insert(plan.degenerate);
        let (record, outcome) = step_and_record(env, &encoder, plan.sequence.first())?;
        buffer.push(record)?;
        if outcome.done() {
            env.reset();
        }
    }
    let executed = buffer.iter().map(|r| r.action).collect();
    Ok(Selection {
        model_id: select_model(pool, &buffer, metric)?,
        buffer,
        executed,
        degenerate: degenerate.unwrap_or(false),
    })
}

/// Explore-then-commit: `k_steps` uniform random actions (resetting finished
/// episodes), then adopt the best-fitting model.
pub fn etc_select<M, E, R>(pool: &ModelPool<M>, env: &mut E, k_steps: usize, metric: FitMetric, rng: &mut R) -> Result<Selection>
where
    M: HypothesisModel,
    E: Environment + ?Sized,
    R: Rng + ?Sized,
{
    if k_steps == 0 {
        return Err(Error::invalid("k_steps must be at least 1"));
    }
    let encoder = pool.encoder().clone();
    let mut buffer = ExperienceBuffer::new();
    for _ in 0..k_steps {
        let a = DiscreteAction(rng.gen_range(0..env.n_actions()));
        let (record, outcome) = step_and_record(env, &encoder, a)?;
        buffer.push(record)?;
        if outcome.done() {
            env.reset();
        }
    }
    let executed = buffer.iter().map(|r| r.action).collect();
    Ok(Selection {
        model_id: select_model(pool, &buffer, metric)?,
        buffer,
        executed,
        degenerate: false,
    })
}

fn default_horizon() -> usize {
    5
}

fn default_rollouts() -> usize {
    2000
}

fn default_discount() -> f64 {
    0.99
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_rollouts")]
    pub n_rollouts: usize,
    #[serde(default = "default_discount")]
    pub discount: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: default_horizon(),
            n_rollouts: default_rollouts(),
            discount: default_discount(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("mpc.horizon", "must be at least 1"));
        }
        if self.n_rollouts == 0 {
            return Err(Error::config("mpc.n_rollouts", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::config("mpc.discount", format!("must lie in [0, 1), got {}", self.discount)));
        }
        Ok(())
    }
}

/// Discounted predicted return of every candidate from `z`; accumulation
/// stops after the first predicted terminal step.
pub fn predicted_returns<M: HypothesisModel + ?Sized>(
    model: &M,
    z: &LatentPoint,
    candidates: &[&[DiscreteAction]],
    discount: f64,
) -> Result<Vec<f64>> {
    let trie = ActionTrie::build(candidates.iter().copied());
    let n = trie.nodes.len();
    let mut points: Vec<Option<LatentPoint>> = vec![None; n];
    points[0] = Some(z.clone());
    let mut value = vec![0.0; n];
    let mut ended = vec![false; n];
    for level in trie.levels.iter().skip(1) {
        let live: Vec<usize> = level
            .iter()
            .copied()
            .filter(|&i| !ended[trie.nodes[i].parent.expect("non-root")])
            .collect();
        for &i in level {
            let parent = trie.nodes[i].parent.expect("non-root");
            if ended[parent] {
                value[i] = value[parent];
                ended[i] = true;
            }
        }
        if live.is_empty() {
            continue;
        }
        let zs: Vec<&LatentPoint> = live
            .iter()
            .map(|&i| points[trie.nodes[i].parent.expect("non-root")].as_ref().expect("live parent has a point"))
            .collect();
        let actions: Vec<DiscreteAction> = live.iter().map(|&i| trie.nodes[i].action).collect();
        let preds = model.predict_points(&zs, &actions)?;
        for (&i, p) in live.iter().zip(preds) {
            let node = trie.nodes[i];
            let parent = node.parent.expect("non-root");
            value[i] = value[parent] + discount.powi(node.depth as i32 - 1) * p.reward;
            ended[i] = p.terminal_prob > TERMINAL_THRESHOLD;
            points[i] = Some(p.next);
        }
    }
    Ok(trie.leaves.iter().map(|&l| value[l]).collect())
}

/// First action of the best candidate (earliest on ties).
pub fn best_first_action<M: HypothesisModel + ?Sized>(
    model: &M,
    z: &LatentPoint,
    candidates: &[Vec<DiscreteAction>],
    discount: f64,
) -> Result<DiscreteAction> {
    if candidates.is_empty() || candidates.iter().any(|c| c.is_empty()) {
        return Err(Error::invalid("MPC needs non-empty candidate sequences"));
    }
    let refs: Vec<&[DiscreteAction]> = candidates.iter().map(|c| c.as_slice()).collect();
    let returns = predicted_returns(model, z, &refs, discount)?;
    Ok(candidates[argmax_first(&returns)][0])
}

/// Random-shooting MPC: the first action of the highest predicted-return
/// sequence. All sequences are tried when there are no more than
/// `n_rollouts` of them.
pub fn mpc_act<M: HypothesisModel + ?Sized, R: Rng + ?Sized>(model: &M, z: &LatentPoint, cfg: &MpcConfig, rng: &mut R) -> Result<DiscreteAction> {
    cfg.validate()?;
    let candidates = candidate_sequences(model.n_actions(), cfg.horizon, cfg.n_rollouts, CandidateSampler::Uniform, rng);
    best_first_action(model, z, &candidates, cfg.discount)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorDecision {
    Keep,
    Unadopt,
}

/// Watches the adopted model's recent prediction error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdoptionMonitor {
    pub window: usize,
    pub mse_threshold: f64,
    pub model_id: Option<usize>,
}

impl AdoptionMonitor {
    pub fn new(window: usize, mse_threshold: f64) -> Result<Self> {
        if window == 0 {
            return Err(Error::config("adapt.monitor_window", "must be at least 1"));
        }
        if !(mse_threshold.is_finite() && mse_threshold > 0.0) {
            return Err(Error::config("adapt.monitor_threshold", format!("must be positive, got {mse_threshold}")));
        }
        Ok(Self {
            window,
            mse_threshold,
            model_id: None,
        })
    }

    /// Window 10 and threshold `tol²`.
    pub fn with_defaults(tol: f64) -> Result<Self> {
        Self::new(10, tol * tol)
    }

    pub fn adopt(&mut self, model_id: usize) {
        self.model_id = Some(model_id);
    }

    /// Keeps the model until a full window of records is available.
    pub fn check<M: HypothesisModel + ?Sized>(&self, recent: &[TransitionRecord], model: &M) -> Result<MonitorDecision> {
        if recent.len() < self.window {
            return Ok(MonitorDecision::Keep);
        }
        let window = &recent[recent.len() - self.window..];
        let zs: Vec<&LatentPoint> = window.iter().map(|r| &r.encoded_state).collect();
        let actions: Vec<DiscreteAction> = window.iter().map(|r| r.action).collect();
        let preds = model.predict_points(&zs, &actions)?;
        let mut total = 0.0;
        for (p, r) in preds.iter().zip(window) {
            total += squared_distance(&p.next, &r.encoded_next)?;
        }
        Ok(if total / self.window as f64 > self.mse_threshold {
            MonitorDecision::Unadopt
        } else {
            MonitorDecision::Keep
        })
    }
}
