//! Monte-Carlo checks of the identification theory on tabular MDPs: the
//! informative region, how often a policy visits it, maximum-likelihood
//! identification error, and the exponential error-ratio bounds.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ModelPool, TabularModel};
use crate::encoder::{Encoder, EncoderKind, EncoderSpec, StateUniverse};
use crate::envs::chain::{ChainTaskSpec, LEFT, RIGHT};
use crate::envs::tabular::TabularMdp;
use crate::error::{Error, Result};
use crate::planning::{plan_experiment, PlannerConfig};
use crate::primitives::{kl_categorical, DiscreteAction, RngStream};

/// `(state, action)` pairs with 0-based state ids.
pub type Region = BTreeSet<(usize, usize)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformativeRegionReport {
    pub region: Region,
    /// Smallest divergence inside the region; `None` when it is empty.
    pub d0: Option<f64>,
    /// Largest divergence outside the region (0 when every pair is inside).
    pub d_bar: f64,
    pub threshold: f64,
}

fn check_family(models: &[&TabularMdp]) -> Result<(usize, usize)> {
    if models.len() < 2 {
        return Err(Error::invalid("need at least two models"));
    }
    let (n_s, n_a) = (models[0].n_states(), models[0].n_actions());
    for m in models {
        if m.n_states() != n_s || m.n_actions() != n_a {
            return Err(Error::invalid("models must share their state and action sets"));
        }
    }
    Ok((n_s, n_a))
}

/// `min` over ordered pairs `i != j` of `KL(P_i(.|s,a) || P_j(.|s,a))`.
pub fn pair_divergence(models: &[&TabularMdp], s: usize, a: usize) -> Result<f64> {
    let mut best = f64::INFINITY;
    for (i, p) in models.iter().enumerate() {
        for (j, q) in models.iter().enumerate() {
            if i != j {
                best = best.min(kl_categorical(p.row(s, a)?, q.row(s, a)?)?);
            }
        }
    }
    Ok(best)
}

/// Exact enumeration of every `(s, a)`; pairs at or above `threshold` form
/// the region.
pub fn informative_region(models: &[&TabularMdp], threshold: f64) -> Result<InformativeRegionReport> {
    let (n_s, n_a) = check_family(models)?;
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("threshold must be positive, got {threshold}")));
    }
    let mut region = Region::new();
    let mut d0: Option<f64> = None;
    let mut d_bar = 0.0_f64;
    for s in 0..n_s {
        for a in 0..n_a {
            let d = pair_divergence(models, s, a)?;
            if d >= threshold {
                region.insert((s, a));
                d0 = Some(d0.map_or(d, |x| x.min(d)));
            } else {
                d_bar = d_bar.max(d);
            }
        }
    }
    Ok(InformativeRegionReport {
        region,
        d0,
        d_bar,
        threshold,
    })
}

/// Exploration policies on the cyclic chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainPolicy {
    Uniform,
    /// Head for the informative state along the cheaper direction, then keep
    /// pressing `right` there, stepping back with `left` after each success.
    HypeChain,
}

impl ChainPolicy {
    pub fn name(self) -> &'static str {
        match self {
            ChainPolicy::Uniform => "uniform",
            ChainPolicy::HypeChain => "hype_chain",
        }
    }

    /// Action at 1-based state `s`.
    pub fn act<R: Rng + ?Sized>(self, task: &ChainTaskSpec, s: usize, rng: &mut R) -> DiscreteAction {
        match self {
            ChainPolicy::Uniform => {
                if rng.gen::<bool>() {
                    RIGHT
                } else {
                    LEFT
                }
            }
            ChainPolicy::HypeChain => {
                let n = task.n_states;
                let target = task.informative_state;
                if s == target {
                    return RIGHT;
                }
                let left_steps = (s + n - target) % n;
                let right_steps = (target + n - s) % n;
                // Expected cost: left always moves, right only with its
                // success probability.
                if (right_steps as f64) / task.right_success_default < left_steps as f64 {
                    RIGHT
                } else {
                    LEFT
                }
            }
        }
    }
}

impl std::fmt::Display for ChainPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ChainPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ChainPolicy::Uniform),
            "hype_chain" => Ok(ChainPolicy::HypeChain),
            other => Err(Error::config("theory.policy", format!("unknown policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyReport {
    pub policy: String,
    pub horizon: usize,
    /// Mean fraction of steps spent in the region.
    pub fraction: f64,
    pub reps: usize,
    pub standard_error: f64,
}

/// One chain trajectory: `(s, a, s')` with 1-based states, from a uniform
/// start.
fn chain_rollout<R: Rng + ?Sized>(
    task: &ChainTaskSpec,
    horizon: usize,
    mut act: impl FnMut(usize, &mut R) -> Result<DiscreteAction>,
    rng: &mut R,
) -> Result<Vec<(usize, DiscreteAction, usize)>> {
    let mut s = rng.gen_range(1..=task.n_states);
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let a = act(s, rng)?;
        let (next, _, _) = crate::envs::chain::chain_step(task, s, a, rng)?;
        out.push((s, a, next));
        s = next;
    }
    Ok(out)
}

fn in_region(region: &Region, s: usize, a: DiscreteAction) -> bool {
    region.contains(&(s - 1, a.index()))
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn check_horizon(horizon: usize, reps: usize) -> Result<()> {
    if horizon == 0 || reps == 0 {
        return Err(Error::invalid("horizon and reps must be at least 1"));
    }
    Ok(())
}

/// Monte-Carlo fraction of steps with `(s_t, a_t)` in `region`.
pub fn occupancy(
    policy: ChainPolicy,
    task: &ChainTaskSpec,
    region: &Region,
    horizon: usize,
    reps: usize,
    stream: RngStream,
) -> Result<OccupancyReport> {
    task.validate()?;
    check_horizon(horizon, reps)?;
    let per_rep: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream.derive(rep as u64).generator();
            let traj = chain_rollout(task, horizon, |s, r| Ok(policy.act(task, s, r)), &mut rng)?;
            Ok(traj.iter().filter(|(s, a, _)| in_region(region, *s, *a)).count() as f64 / horizon as f64)
        })
        .collect::<Result<_>>()?;
    let (fraction, standard_error) = mean_and_se(&per_rep);
    Ok(OccupancyReport {
        policy: policy.name().to_string(),
        horizon,
        fraction,
        reps,
        standard_error,
    })
}

/// Error weight of a maximum-likelihood pick: 0 when the truth wins alone,
/// 1 when it loses, and the chance of a wrong uniform pick among ties.
fn mle_error(log_liks: &[f64], true_index: usize) -> f64 {
    let best = log_liks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if log_liks[true_index] < best {
        return 1.0;
    }
    let tied = log_liks.iter().filter(|&&l| l == best).count();
    1.0 - 1.0 / tied as f64
}

/// Maximum-likelihood identification error of `tasks[true_index]` from
/// `horizon` steps of `policy`, averaged over `reps` rollouts.
pub fn identification_experiment(
    tasks: &[ChainTaskSpec],
    true_index: usize,
    policy: ChainPolicy,
    horizon: usize,
    reps: usize,
    stream: RngStream,
) -> Result<f64> {
    if tasks.len() < 2 {
        return Err(Error::invalid("need at least two candidate tasks"));
    }
    if true_index >= tasks.len() {
        return Err(Error::invalid(format!("true index {true_index} outside the {} tasks", tasks.len())));
    }
    if reps == 0 {
        return Err(Error::invalid("reps must be at least 1"));
    }
    let mdps = tasks.iter().map(ChainTaskSpec::to_tabular).collect::<Result<Vec<_>>>()?;
    let truth = &tasks[true_index];
    let errors: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream.derive(rep as u64).generator();
            let traj = chain_rollout(truth, horizon, |s, r| Ok(policy.act(truth, s, r)), &mut rng)?;
            let log_liks = mdps
                .iter()
                .map(|m| {
                    traj.iter().try_fold(0.0, |acc, (s, a, next)| {
                        Ok::<_, Error>(acc + m.row(s - 1, a.index())?[next - 1].ln())
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(mle_error(&log_liks, true_index))
        })
        .collect::<Result<_>>()?;
    Ok(errors.iter().sum::<f64>() / reps as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremOneBound {
    /// `exp(-(alpha - eps) * d0 * T)`.
    pub bound: f64,
    /// `alpha / eps`; infinite when `eps = 0`.
    pub ior: f64,
}

/// Error-ratio bound between a policy with occupancy `alpha` and one with
/// occupancy `eps`.
pub fn theorem1_bound(eps: f64, alpha: f64, d0: f64, horizon: f64) -> Result<TheoremOneBound> {
    if !(eps >= 0.0 && alpha >= eps && alpha <= 1.0) {
        return Err(Error::invalid(format!("need 0 <= eps <= alpha <= 1, got eps = {eps}, alpha = {alpha}")));
    }
    if !(d0 > 0.0) || !(horizon >= 0.0) {
        return Err(Error::invalid(format!("need d0 > 0 and T >= 0, got d0 = {d0}, T = {horizon}")));
    }
    Ok(TheoremOneBound {
        bound: (-(alpha - eps) * d0 * horizon).exp(),
        ior: if eps == 0.0 { f64::INFINITY } else { alpha / eps },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosestModelReport {
    /// Position in the pool of the model closest to the truth in worst-case KL.
    pub closest: usize,
    pub worst_case_kl: Vec<f64>,
    /// Smallest advantage over the region, floored at 0.
    pub gamma: f64,
    /// The unfloored minimum; negative when the closest model is not
    /// uniformly better on the region.
    pub raw_gamma: f64,
    pub region: Region,
}

impl ClosestModelReport {
    pub fn assumption_holds(&self) -> bool {
        self.raw_gamma > 0.0
    }
}

/// Closest pool model to an external truth and its per-pair KL advantage
/// over the rest, on the pool's informative region at `threshold`.
pub fn theorem2_gamma(pool: &[&TabularMdp], truth: &TabularMdp, threshold: f64) -> Result<ClosestModelReport> {
    let (n_s, n_a) = check_family(pool)?;
    check_family(&[pool[0], truth])?;
    if pool.contains(&truth) {
        return Err(Error::invalid("the true MDP must not be in the pool"));
    }
    let mut kl_to = vec![vec![0.0; n_s * n_a]; pool.len()];
    for (j, m) in pool.iter().enumerate() {
        for s in 0..n_s {
            for a in 0..n_a {
                kl_to[j][s * n_a + a] = kl_categorical(truth.row(s, a)?, m.row(s, a)?)?;
            }
        }
    }
    let worst_case_kl: Vec<f64> = kl_to.iter().map(|v| v.iter().copied().fold(0.0, f64::max)).collect();
    let mut closest = 0;
    for (j, w) in worst_case_kl.iter().enumerate() {
        if *w < worst_case_kl[closest] {
            closest = j;
        }
    }
    let region = informative_region(pool, threshold)?.region;
    let mut raw_gamma = f64::INFINITY;
    for &(s, a) in &region {
        for j in (0..pool.len()).filter(|&j| j != closest) {
            raw_gamma = raw_gamma.min(kl_to[j][s * n_a + a] - kl_to[closest][s * n_a + a]);
        }
    }
    if region.is_empty() {
        raw_gamma = 0.0;
    }
    Ok(ClosestModelReport {
        closest,
        worst_case_kl,
        gamma: raw_gamma.max(0.0),
        raw_gamma,
        region,
    })
}

/// Settings for driving the chain with the real experiment planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainPlannerCheck {
    pub planner: PlannerConfig,
    /// Steps executed from each plan before replanning.
    pub replan_every: usize,
}

/// Region occupancy when each action comes from [`plan_experiment`] over
/// tabular models of `tasks`, replanned every `replan_every` steps. A
/// degenerate plan falls back to a uniform action.
pub fn planned_chain_occupancy(
    tasks: &[ChainTaskSpec],
    true_index: usize,
    region: &Region,
    check: &ChainPlannerCheck,
    horizon: usize,
    reps: usize,
    stream: RngStream,
) -> Result<OccupancyReport> {
    check_horizon(horizon, reps)?;
    if check.replan_every == 0 {
        return Err(Error::config("theory.planner_check.replan_every", "must be at least 1"));
    }
    let truth = tasks
        .get(true_index)
        .ok_or_else(|| Error::invalid(format!("true index {true_index} outside the {} tasks", tasks.len())))?;
    let n = truth.n_states;
    let encoder = Arc::new(Encoder::new(
        EncoderSpec::new(EncoderKind::OneHot, n, 0),
        StateUniverse::Discrete { n_states: n },
    )?);
    let models = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| TabularModel::new(i, t.to_tabular()?, encoder.clone()))
        .collect::<Result<Vec<_>>>()?;
    let pool = ModelPool::new(models, encoder.clone())?;
    let per_rep: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream.derive(rep as u64).generator();
            let mut queue: Vec<DiscreteAction> = Vec::new();
            let mut t = 0;
            let traj = chain_rollout(
                truth,
                horizon,
                |s, r| {
                    if queue.is_empty() {
                        let cfg = PlannerConfig {
                            k: check.planner.k.min(horizon - t),
                            ..check.planner.clone()
                        };
                        let z = encoder.codebook()[s - 1].clone();
                        let plan = plan_experiment(&pool, &z, &cfg, r)?;
                        if plan.degenerate {
                            queue.push(ChainPolicy::Uniform.act(truth, s, r));
                        } else {
                            queue = plan.sequence.actions().iter().take(check.replan_every).rev().copied().collect();
                        }
                    }
                    t += 1;
                    Ok(queue.pop().expect("queue refilled above"))
                },
                &mut rng,
            )?;
            Ok(traj.iter().filter(|(s, a, _)| in_region(region, *s, *a)).count() as f64 / horizon as f64)
        })
        .collect::<Result<_>>()?;
    let (fraction, standard_error) = mean_and_se(&per_rep);
    Ok(OccupancyReport {
        policy: "planner".to_string(),
        horizon,
        fraction,
        reps,
        standard_error,
    })
}

/// One row of the theory sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: ChainPolicy,
    pub horizon: usize,
    pub reps: usize,
    pub epsilon_or_alpha: f64,
    pub error_rate: f64,
    /// The bound at this horizon, from the measured occupancies of both
    /// policies; `None` when the planned occupancy does not exceed the
    /// uniform one.
    pub bound_value: Option<f64>,
    pub ior: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    /// Index of the true task among `[mdp1, mdp2]`.
    #[serde(default = "default_true_index")]
    pub true_index: usize,
}

fn default_threshold() -> f64 {
    0.1
}

fn default_horizons() -> Vec<usize> {
    vec![10, 25, 50, 100]
}

fn default_reps() -> usize {
    10_000
}

fn default_true_index() -> usize {
    1
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            threshold: default_threshold(),
            horizons: default_horizons(),
            reps: default_reps(),
            true_index: default_true_index(),
        }
    }
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::config("theory.threshold", "must be positive"));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::config("theory.horizons", "must be a non-empty list of positive horizons"));
        }
        if self.reps == 0 {
            return Err(Error::config("theory.reps", "must be at least 1"));
        }
        if self.true_index > 1 {
            return Err(Error::config("theory.true_index", "must be 0 or 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub region: InformativeRegionReport,
    pub rows: Vec<SweepRow>,
}

/// Region, occupancies, identification errors and bounds for both chain
/// policies at every configured horizon.
pub fn chain_sweep(cfg: &TheoryConfig, seed: u64) -> Result<TheoryReport> {
    cfg.validate()?;
    let tasks = [ChainTaskSpec::mdp1(), ChainTaskSpec::mdp2()];
    let mdps = tasks.iter().map(ChainTaskSpec::to_tabular).collect::<Result<Vec<_>>>()?;
    let region = informative_region(&mdps.iter().collect::<Vec<_>>(), cfg.threshold)?;
    let truth = &tasks[cfg.true_index];
    let root = RngStream::new(seed, crate::primitives::streams::THEORY);
    let mut rows = Vec::new();
    for (hi, &h) in cfg.horizons.iter().enumerate() {
        let mut pair = Vec::new();
        for (pi, policy) in [ChainPolicy::Uniform, ChainPolicy::HypeChain].into_iter().enumerate() {
            let s = root.derive(hi as u64).derive(pi as u64);
            let occ = occupancy(policy, truth, &region.region, h, cfg.reps, s.derive(0))?;
            let err = identification_experiment(&tasks, cfg.true_index, policy, h, cfg.reps, s.derive(1))?;
            pair.push((policy, occ.fraction, err));
        }
        let (eps, alpha) = (pair[0].1, pair[1].1);
        let bound = match region.d0 {
            Some(d0) if alpha > eps => Some(theorem1_bound(eps, alpha, d0, h as f64)?),
            _ => None,
        };
        for (policy, frac, err) in pair {
            rows.push(SweepRow {
                policy,
                horizon: h,
                reps: cfg.reps,
                epsilon_or_alpha: frac,
                error_rate: err,
                bound_value: bound.map(|b| b.bound),
                ior: bound.map(|b| b.ior),
            });
        }
    }
    Ok(TheoryReport { region, rows })
}
