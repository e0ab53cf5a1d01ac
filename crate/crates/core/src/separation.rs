//! Separating functions: how strongly a candidate action sequence makes the
//! models of a pool disagree.
//!
//! Every model rolls the sequence forward along its own predicted latent path
//! (a "fan"). Each action contributes one term, comparing the models'
//! predictions of the state it leads to.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{HypothesisModel, ModelMode, ModelPool, NextDistribution, TERMINAL_THRESHOLD};
use crate::encoder::Encoder;
use crate::primitives::{
    clamp_divergence, kl_categorical, kl_diag_gaussian, l2_distance, DiscreteAction, LatentGaussian, LatentPoint,
    DEFAULT_D_CAP,
};
use crate::trie::ActionTrie;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationFunction {
    /// Count of model pairs whose predictions are more than `tol` apart.
    Incon,
    /// Sum of pairwise latent distances.
    L2a,
    /// Sum of distances to the pool's mean prediction.
    Cd,
    /// Sum of pairwise KL divergences.
    Pkl,
    /// Sum of KL divergences to the pool's average prediction.
    Ckld,
}

impl SeparationFunction {
    pub const ALL: [SeparationFunction; 5] = [Self::Incon, Self::L2a, Self::Cd, Self::Pkl, Self::Ckld];

    pub fn name(self) -> &'static str {
        match self {
            Self::Incon => "incon",
            Self::L2a => "l2a",
            Self::Cd => "cd",
            Self::Pkl => "pkl",
            Self::Ckld => "ckld",
        }
    }

    /// Whether cost grows quadratically (pairwise) rather than linearly in the
    /// number of models.
    pub fn is_pairwise(self) -> bool {
        matches!(self, Self::Incon | Self::L2a | Self::Pkl)
    }

    pub fn uses_distributions(self) -> bool {
        matches!(self, Self::Pkl | Self::Ckld)
    }

    /// Point-based functions need deterministic models. Distribution-based
    /// ones accept both: deterministic delta models carry a Gaussian wrapper
    /// and deterministic tabular models a one-hot row.
    pub fn supports(self, mode: ModelMode) -> bool {
        self.uses_distributions() || mode == ModelMode::Deterministic
    }
}

impl std::fmt::Display for SeparationFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_d_cap() -> f64 {
    DEFAULT_D_CAP
}

fn default_truncate() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparationConfig {
    pub function: SeparationFunction,
    /// Incon tolerance; `None` means half the encoder's minimum inter-state
    /// distance.
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default = "default_d_cap")]
    pub d_cap: f64,
    /// Stop accumulating once the pool, on average, predicts the episode has
    /// ended.
    #[serde(default = "default_truncate")]
    pub truncate_at_terminal: bool,
}

impl SeparationConfig {
    pub fn new(function: SeparationFunction) -> Self {
        Self {
            function,
            tol: None,
            d_cap: DEFAULT_D_CAP,
            truncate_at_terminal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(tol) = self.tol {
            if !(tol.is_finite() && tol > 0.0) {
                return Err(Error::config("separation.tol", format!("must be positive, got {tol}")));
            }
        }
        if !(self.d_cap > 0.0) || self.d_cap.is_nan() {
            return Err(Error::config("separation.d_cap", format!("must be positive, got {}", self.d_cap)));
        }
        Ok(())
    }

    pub fn resolved_tol(&self, encoder: &Encoder) -> f64 {
        self.tol.unwrap_or_else(|| encoder.default_tol())
    }
}

/// Number of elementary comparisons performed: one per model pair per step
/// for pairwise functions, one per model per step for the others.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    pub comparisons: u64,
}

/// Per-model latent trajectories from a shared start.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutFan {
    /// `trajectories[i][t]`: model `i`'s latent after `t` actions.
    pub trajectories: Vec<Vec<LatentPoint>>,
    /// `terminal_probs[i][t]`: model `i`'s terminal probability for action `t`.
    pub terminal_probs: Vec<Vec<f64>>,
    /// `distributions[i][t]`: model `i`'s next-state distribution for action
    /// `t`, present when requested.
    pub distributions: Option<Vec<Vec<NextDistribution>>>,
}

impl RolloutFan {
    pub fn n_models(&self) -> usize {
        self.trajectories.len()
    }

    /// Number of actions rolled out.
    pub fn n_steps(&self) -> usize {
        self.trajectories[0].len() - 1
    }

    pub fn points_at(&self, t: usize) -> Vec<&LatentPoint> {
        self.trajectories.iter().map(|tr| &tr[t]).collect()
    }

    /// Arithmetic mean over models after `t` actions.
    pub fn mean_at(&self, t: usize) -> LatentPoint {
        mean_point(&self.points_at(t))
    }
}

fn mean_point(points: &[&LatentPoint]) -> LatentPoint {
    let n = points.len() as f64;
    let mut acc = vec![0.0; points[0].dim()];
    for p in points {
        for (a, x) in acc.iter_mut().zip(p.as_slice()) {
            *a += x;
        }
    }
    LatentPoint::new(acc.into_iter().map(|x| x / n).collect()).expect("mean of finite points is finite")
}

fn all_equal<T: PartialEq>(items: &[&T]) -> bool {
    items.windows(2).all(|w| w[0] == w[1])
}

/// Roll `sigma` forward from `z0` under every model of the pool.
pub fn rollout_fan<M: HypothesisModel>(pool: &ModelPool<M>, sigma: &[DiscreteAction], z0: &LatentPoint) -> Result<RolloutFan> {
    fan(pool, sigma, z0, false)
}

/// [`rollout_fan`] that also records each step's predicted distribution.
pub fn rollout_fan_with_distributions<M: HypothesisModel>(
    pool: &ModelPool<M>,
    sigma: &[DiscreteAction],
    z0: &LatentPoint,
) -> Result<RolloutFan> {
    fan(pool, sigma, z0, true)
}

fn fan<M: HypothesisModel>(pool: &ModelPool<M>, sigma: &[DiscreteAction], z0: &LatentPoint, with_dists: bool) -> Result<RolloutFan> {
    if z0.dim() != pool.latent_dim() {
        return Err(Error::DimensionMismatch {
            expected: pool.latent_dim(),
            got: z0.dim(),
        });
    }
    let mut trajectories = Vec::with_capacity(pool.len());
    let mut terminal_probs = Vec::with_capacity(pool.len());
    let mut distributions = Vec::with_capacity(pool.len());
    for m in pool.models() {
        let mut tr = vec![z0.clone()];
        let mut tp = Vec::with_capacity(sigma.len());
        let mut ds = Vec::new();
        for &a in sigma {
            let z = tr.last().expect("non-empty trajectory");
            if with_dists {
                ds.push(m.predict_distribution(z, a)?);
            }
            let p = m.predict_point(z, a)?;
            tp.push(p.terminal_prob);
            tr.push(p.next);
        }
        trajectories.push(tr);
        terminal_probs.push(tp);
        distributions.push(ds);
    }
    Ok(RolloutFan {
        trajectories,
        terminal_probs,
        distributions: with_dists.then_some(distributions),
    })
}

/// One step's contribution given every model's predicted next latent (and
/// distribution, for KL-based functions).
#[derive(Debug, Clone, Copy)]
struct StepScorer {
    function: SeparationFunction,
    tol: f64,
    d_cap: f64,
}

impl StepScorer {
    fn term(&self, points: &[&LatentPoint], dists: &[&NextDistribution], ops: &mut OpCount) -> Result<f64> {
        let n = points.len().max(dists.len());
        match self.function {
            SeparationFunction::Incon => {
                let mut count = 0.0;
                for i in 0..n {
                    for j in i + 1..n {
                        ops.comparisons += 1;
                        if l2_distance(points[i], points[j])? > self.tol {
                            count += 1.0;
                        }
                    }
                }
                Ok(count)
            }
            SeparationFunction::L2a => {
                let mut total = 0.0;
                for i in 0..n {
                    for j in i + 1..n {
                        ops.comparisons += 1;
                        total += l2_distance(points[i], points[j])?;
                    }
                }
                Ok(total)
            }
            SeparationFunction::Cd => {
                ops.comparisons += n as u64;
                if all_equal(points) {
                    return Ok(0.0);
                }
                let mu = mean_point(points);
                points.iter().map(|p| l2_distance(p, &mu)).sum()
            }
            SeparationFunction::Pkl => {
                let mut total = 0.0;
                for i in 0..n {
                    for j in i + 1..n {
                        ops.comparisons += 1;
                        total += clamp_divergence(kl(dists[i], dists[j])?, self.d_cap);
                    }
                }
                Ok(total)
            }
            SeparationFunction::Ckld => {
                ops.comparisons += n as u64;
                if all_equal(dists) {
                    return Ok(0.0);
                }
                let avg = average_distribution(dists)?;
                let mut total = 0.0;
                for d in dists {
                    total += clamp_divergence(kl(d, &avg)?, self.d_cap);
                }
                Ok(total)
            }
        }
    }
}

fn kl(p: &NextDistribution, q: &NextDistribution) -> Result<f64> {
    if p == q {
        return Ok(0.0);
    }
    match (p, q) {
        (NextDistribution::Gaussian(p), NextDistribution::Gaussian(q)) => kl_diag_gaussian(p, q),
        (NextDistribution::Categorical { probs: p }, NextDistribution::Categorical { probs: q }) => kl_categorical(p, q),
        _ => Err(Error::InvalidDistribution(
            "cannot compare a Gaussian prediction with a categorical one".into(),
        )),
    }
}

/// Equal-weight average: the exact mixture for categorical rows, the
/// moment-matched Gaussian otherwise.
fn average_distribution(dists: &[&NextDistribution]) -> Result<NextDistribution> {
    let n = dists.len() as f64;
    match dists[0] {
        NextDistribution::Categorical { probs } => {
            let mut acc = vec![0.0; probs.len()];
            for d in dists {
                let NextDistribution::Categorical { probs } = d else {
                    return Err(Error::InvalidDistribution("mixed distribution kinds in pool".into()));
                };
                if probs.len() != acc.len() {
                    return Err(Error::DimensionMismatch {
                        expected: acc.len(),
                        got: probs.len(),
                    });
                }
                for (a, p) in acc.iter_mut().zip(probs) {
                    *a += p;
                }
            }
            Ok(NextDistribution::Categorical {
                probs: acc.into_iter().map(|x| x / n).collect(),
            })
        }
        NextDistribution::Gaussian(g0) => {
            let d = g0.dim();
            let mut mean = vec![0.0; d];
            let mut second = vec![0.0; d];
            for dist in dists {
                let NextDistribution::Gaussian(g) = dist else {
                    return Err(Error::InvalidDistribution("mixed distribution kinds in pool".into()));
                };
                if g.dim() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: g.dim() });
                }
                for k in 0..d {
                    let m = g.mean().as_slice()[k];
                    mean[k] += m;
                    second[k] += g.variance()[k] + m * m;
                }
            }
            let mean: Vec<f64> = mean.into_iter().map(|x| x / n).collect();
            // Floor at the smallest component variance so cancellation cannot
            // produce a variance below every input's.
            let floor = dists
                .iter()
                .filter_map(|d| match d {
                    NextDistribution::Gaussian(g) => g.variance().iter().copied().reduce(f64::min),
                    NextDistribution::Categorical { .. } => None,
                })
                .fold(f64::INFINITY, f64::min);
            let var: Vec<f64> = second
                .into_iter()
                .zip(&mean)
                .map(|(s, m)| (s / n - m * m).max(floor))
                .collect();
            Ok(NextDistribution::Gaussian(LatentGaussian::new(LatentPoint::new(mean)?, var)?))
        }
    }
}

fn sum_fan_terms(fan: &RolloutFan, scorer: StepScorer, ops: &mut OpCount) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..fan.n_steps() {
        let points = fan.points_at(t + 1);
        let dists: Vec<&NextDistribution> = match &fan.distributions {
            Some(d) => d.iter().map(|row| &row[t]).collect(),
            None => Vec::new(),
        };
        total += scorer.term(&points, &dists, ops)?;
    }
    Ok(total)
}

/// Number of (model pair, step) predictions farther apart than `tol`.
pub fn incon<M: HypothesisModel>(pool: &ModelPool<M>, sigma: &[DiscreteAction], z0: &LatentPoint, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tol must be positive, got {tol}")));
    }
    let scorer = StepScorer {
        function: SeparationFunction::Incon,
        tol,
        d_cap: DEFAULT_D_CAP,
    };
    let s = sum_fan_terms(&rollout_fan(pool, sigma, z0)?, scorer, &mut OpCount::default())?;
    Ok(s as usize)
}

pub fn l2a<M: HypothesisModel>(pool: &ModelPool<M>, sigma: &[DiscreteAction], z0: &LatentPoint) -> Result<f64> {
    let scorer = StepScorer {
        function: SeparationFunction::L2a,
        tol: 1.0,
        d_cap: DEFAULT_D_CAP,
    };
    sum_fan_terms(&rollout_fan(pool, sigma, z0)?, scorer, &mut OpCount::default())
}

pub fn cd<M: HypothesisModel>(pool: &ModelPool<M>, sigma: &[DiscreteAction], z0: &LatentPoint) -> Result<f64> {
    let scorer = StepScorer {
        function: SeparationFunction::Cd,
        tol: 1.0,
        d_cap: DEFAULT_D_CAP,
    };
    sum_fan_terms(&rollout_fan(pool, sigma, z0)?, scorer, &mut OpCount::default())
}

pub fn pkl<M: HypothesisModel>(pool: &ModelPool<M>, sigma: &[DiscreteAction], z0: &LatentPoint, d_cap: f64) -> Result<f64> {
    let scorer = StepScorer {
        function: SeparationFunction::Pkl,
        tol: 1.0,
        d_cap,
    };
    sum_fan_terms(&rollout_fan_with_distributions(pool, sigma, z0)?, scorer, &mut OpCount::default())
}

pub fn ckld<M: HypothesisModel>(pool: &ModelPool<M>, sigma: &[DiscreteAction], z0: &LatentPoint, d_cap: f64) -> Result<f64> {
    let scorer = StepScorer {
        function: SeparationFunction::Ckld,
        tol: 1.0,
        d_cap,
    };
    sum_fan_terms(&rollout_fan_with_distributions(pool, sigma, z0)?, scorer, &mut OpCount::default())
}

/// A separating function bound to a pool's geometry.
#[derive(Debug, Clone, Copy)]
pub struct Separator {
    scorer: StepScorer,
    truncate_at_terminal: bool,
}

impl Separator {
    /// Validates the configuration and that the function applies to every
    /// model in the pool.
    pub fn new<M: HypothesisModel>(cfg: &SeparationConfig, pool: &ModelPool<M>) -> Result<Self> {
        cfg.validate()?;
        if let Some(m) = pool.models().iter().find(|m| !cfg.function.supports(m.mode())) {
            return Err(Error::config(
                "separation.function",
                format!(
                    "`{}` needs deterministic models, but model {} is stochastic",
                    cfg.function,
                    m.model_id()
                ),
            ));
        }
        Ok(Self {
            scorer: StepScorer {
                function: cfg.function,
                tol: cfg.resolved_tol(pool.encoder()),
                d_cap: cfg.d_cap,
            },
            truncate_at_terminal: cfg.truncate_at_terminal,
        })
    }

    pub fn function(&self) -> SeparationFunction {
        self.scorer.function
    }

    pub fn tol(&self) -> f64 {
        self.scorer.tol
    }

    /// Score of one sequence.
    pub fn score<M: HypothesisModel>(&self, pool: &ModelPool<M>, sigma: &[DiscreteAction], z0: &LatentPoint) -> Result<f64> {
        let mut ops = OpCount::default();
        self.score_counted(pool, sigma, z0, &mut ops)
    }

    pub fn score_counted<M: HypothesisModel>(
        &self,
        pool: &ModelPool<M>,
        sigma: &[DiscreteAction],
        z0: &LatentPoint,
        ops: &mut OpCount,
    ) -> Result<f64> {
        let fan = fan(pool, sigma, z0, self.scorer.function.uses_distributions())?;
        let mut total = 0.0;
        for t in 0..fan.n_steps() {
            let points = fan.points_at(t + 1);
            let dists: Vec<&NextDistribution> = match &fan.distributions {
                Some(d) => d.iter().map(|row| &row[t]).collect(),
                None => Vec::new(),
            };
            total += self.scorer.term(&points, &dists, ops)?;
            if self.truncate_at_terminal {
                let mean_tp = fan.terminal_probs.iter().map(|tp| tp[t]).sum::<f64>() / fan.n_models() as f64;
                if mean_tp > TERMINAL_THRESHOLD {
                    break;
                }
            }
        }
        Ok(total)
    }

    /// Scores of many sequences at once. Shared prefixes are rolled out once
    /// and each model predicts a whole tree level in one batch; results match
    /// [`score`](Self::score) candidate by candidate.
    pub fn score_candidates<M: HypothesisModel>(
        &self,
        pool: &ModelPool<M>,
        candidates: &[&[DiscreteAction]],
        z0: &LatentPoint,
    ) -> Result<Vec<f64>> {
        if z0.dim() != pool.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: pool.latent_dim(),
                got: z0.dim(),
            });
        }
        let trie = ActionTrie::build(candidates.iter().copied());
        let n_nodes = trie.nodes.len();
        let with_dists = self.scorer.function.uses_distributions();

        // Per model, per node: predicted latent, terminal prob, distribution.
        let per_model: Vec<(Vec<LatentPoint>, Vec<f64>, Vec<Option<NextDistribution>>)> = pool
            .models()
            .par_iter()
            .map(|m| {
                let mut points: Vec<LatentPoint> = vec![LatentPoint::zeros(0); n_nodes];
                let mut tps = vec![0.0; n_nodes];
                let mut dists: Vec<Option<NextDistribution>> = vec![None; n_nodes];
                points[0] = z0.clone();
                for level in trie.levels.iter().skip(1) {
                    let (zs, actions): (Vec<&LatentPoint>, Vec<DiscreteAction>) = level
                        .iter()
                        .map(|&n| {
                            let node = &trie.nodes[n];
                            (&points[node.parent.expect("non-root")], node.action)
                        })
                        .unzip();
                    let preds = m.predict_points(&zs, &actions)?;
                    let ds = if with_dists {
                        Some(m.predict_distributions(&zs, &actions)?)
                    } else {
                        None
                    };
                    for (i, p) in preds.into_iter().enumerate() {
                        points[level[i]] = p.next;
                        tps[level[i]] = p.terminal_prob;
                    }
                    if let Some(ds) = ds {
                        for (i, d) in ds.into_iter().enumerate() {
                            dists[level[i]] = Some(d);
                        }
                    }
                }
                Ok((points, tps, dists))
            })
            .collect::<Result<_>>()?;

        // Cumulative score and "already ended" flag per node, top-down.
        let terms: Vec<f64> = (1..n_nodes)
            .into_par_iter()
            .map(|n| {
                let points: Vec<&LatentPoint> = per_model.iter().map(|m| &m.0[n]).collect();
                let dists: Vec<&NextDistribution> = if with_dists {
                    per_model.iter().map(|m| m.2[n].as_ref().expect("distribution")).collect()
                } else {
                    Vec::new()
                };
                self.scorer.term(&points, &dists, &mut OpCount::default())
            })
            .collect::<Result<_>>()?;
        let mut cumulative = vec![0.0; n_nodes];
        let mut ended = vec![false; n_nodes];
        for level in trie.levels.iter().skip(1) {
            for &n in level {
                let parent = trie.nodes[n].parent.expect("non-root");
                if ended[parent] {
                    cumulative[n] = cumulative[parent];
                    ended[n] = true;
                    continue;
                }
                cumulative[n] = cumulative[parent] + terms[n - 1];
                if self.truncate_at_terminal {
                    let mean_tp = per_model.iter().map(|m| m.1[n]).sum::<f64>() / pool.len() as f64;
                    ended[n] = mean_tp > TERMINAL_THRESHOLD;
                }
            }
        }
        Ok(trie.leaves.iter().map(|&l| cumulative[l]).collect())
    }
}
