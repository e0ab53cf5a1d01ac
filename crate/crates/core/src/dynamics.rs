//! Hypothesis models: neural latent delta models and tabular categorical
//! models, the pool they live in, and goodness-of-fit scoring.

use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::envs::tabular::TabularMdp;
use crate::error::{Error, Result};
use crate::nn::{FeedforwardNet, OptimizerState};
use crate::primitives::{
    clamp_divergence, squared_distance, DiscreteAction, ExperienceBuffer, LatentGaussian, LatentPoint, RngStream,
    TransitionRecord, DEFAULT_D_CAP,
};

/// Variance of the Gaussian placed around deterministic predictions.
pub const DEFAULT_SIGMA2_DET: f64 = 1e-4;

/// Above this predicted terminal probability a planner treats a step as terminal.
pub const TERMINAL_THRESHOLD: f64 = 0.5;

/// Hidden layer widths of the delta model.
pub const DELTA_HIDDEN: [usize; 2] = [256, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointPrediction {
    pub next: LatentPoint,
    pub reward: f64,
    pub terminal_prob: f64,
}

impl PointPrediction {
    pub fn is_terminal(&self) -> bool {
        self.terminal_prob > TERMINAL_THRESHOLD
    }
}

/// Predicted next-state distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum NextDistribution {
    Gaussian(LatentGaussian),
    /// Probabilities over the encoder's state ids.
    Categorical { probs: Vec<f64> },
}

/// A dynamics and reward predictor over the shared latent space.
pub trait HypothesisModel: Send + Sync {
    fn model_id(&self) -> usize;

    fn mode(&self) -> ModelMode;

    fn latent_dim(&self) -> usize;

    fn n_actions(&self) -> usize;

    fn predict_point(&self, z: &LatentPoint, a: DiscreteAction) -> Result<PointPrediction>;

    /// Batched [`predict_point`](Self::predict_point); `zs` and `actions` pair up.
    fn predict_points(&self, zs: &[&LatentPoint], actions: &[DiscreteAction]) -> Result<Vec<PointPrediction>> {
        if zs.len() != actions.len() {
            return Err(Error::DimensionMismatch {
                expected: zs.len(),
                got: actions.len(),
            });
        }
        zs.iter().zip(actions).map(|(z, a)| self.predict_point(z, *a)).collect()
    }

    fn predict_distribution(&self, z: &LatentPoint, a: DiscreteAction) -> Result<NextDistribution>;

    /// Batched [`predict_distribution`](Self::predict_distribution).
    fn predict_distributions(&self, zs: &[&LatentPoint], actions: &[DiscreteAction]) -> Result<Vec<NextDistribution>> {
        check_dim(zs.len(), actions.len())?;
        zs.iter().zip(actions).map(|(z, a)| self.predict_distribution(z, *a)).collect()
    }

    /// Log-probability the model assigns to the record's observed next state.
    fn outcome_log_prob(&self, record: &TransitionRecord) -> Result<f64>;
}

impl<M: HypothesisModel + ?Sized> HypothesisModel for Box<M> {
    fn model_id(&self) -> usize {
        (**self).model_id()
    }
    fn mode(&self) -> ModelMode {
        (**self).mode()
    }
    fn latent_dim(&self) -> usize {
        (**self).latent_dim()
    }
    fn n_actions(&self) -> usize {
        (**self).n_actions()
    }
    fn predict_point(&self, z: &LatentPoint, a: DiscreteAction) -> Result<PointPrediction> {
        (**self).predict_point(z, a)
    }
    fn predict_points(&self, zs: &[&LatentPoint], actions: &[DiscreteAction]) -> Result<Vec<PointPrediction>> {
        (**self).predict_points(zs, actions)
    }
    fn predict_distribution(&self, z: &LatentPoint, a: DiscreteAction) -> Result<NextDistribution> {
        (**self).predict_distribution(z, a)
    }
    fn predict_distributions(&self, zs: &[&LatentPoint], actions: &[DiscreteAction]) -> Result<Vec<NextDistribution>> {
        (**self).predict_distributions(zs, actions)
    }
    fn outcome_log_prob(&self, record: &TransitionRecord) -> Result<f64> {
        (**self).outcome_log_prob(record)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// Network that predicts the change in latent state, the reward and a
/// terminal logit from `[z, one_hot(a)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDeltaModel {
    model_id: usize,
    latent_dim: usize,
    n_actions: usize,
    net: FeedforwardNet,
    sigma2_det: f64,
}

impl LatentDeltaModel {
    pub fn new(model_id: usize, latent_dim: usize, n_actions: usize, stream: RngStream) -> Result<Self> {
        let sizes = [latent_dim + n_actions, DELTA_HIDDEN[0], DELTA_HIDDEN[1], latent_dim + 2];
        Self::from_net(model_id, latent_dim, n_actions, FeedforwardNet::new(&sizes, stream)?)
    }

    pub fn from_net(model_id: usize, latent_dim: usize, n_actions: usize, net: FeedforwardNet) -> Result<Self> {
        check_dim(latent_dim + n_actions, net.input_dim())?;
        check_dim(latent_dim + 2, net.output_dim())?;
        Ok(Self {
            model_id,
            latent_dim,
            n_actions,
            net,
            sigma2_det: DEFAULT_SIGMA2_DET,
        })
    }

    pub fn with_sigma2(mut self, sigma2: f64) -> Result<Self> {
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::invalid(format!("sigma2_det must be positive, got {sigma2}")));
        }
        self.sigma2_det = sigma2;
        Ok(self)
    }

    pub fn with_id(mut self, model_id: usize) -> Self {
        self.model_id = model_id;
        self
    }

    pub fn net(&self) -> &FeedforwardNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut FeedforwardNet {
        &mut self.net
    }

    pub fn sigma2_det(&self) -> f64 {
        self.sigma2_det
    }

    fn input_row(&self, z: &LatentPoint, a: DiscreteAction, row: &mut [f64]) -> Result<()> {
        check_dim(self.latent_dim, z.dim())?;
        let a = DiscreteAction::checked(a.index(), self.n_actions)?.index();
        row[..self.latent_dim].copy_from_slice(z.as_slice());
        row[self.latent_dim..].iter_mut().for_each(|x| *x = 0.0);
        row[self.latent_dim + a] = 1.0;
        Ok(())
    }

    fn inputs<'a>(&self, pairs: impl ExactSizeIterator<Item = (&'a LatentPoint, DiscreteAction)>) -> Result<Array2<f64>> {
        let width = self.latent_dim + self.n_actions;
        let mut x = Array2::zeros((pairs.len(), width));
        for (mut row, (z, a)) in x.rows_mut().into_iter().zip(pairs) {
            self.input_row(z, a, row.as_slice_mut().expect("standard layout"))?;
        }
        Ok(x)
    }
}

impl HypothesisModel for LatentDeltaModel {
    fn model_id(&self) -> usize {
        self.model_id
    }

    fn mode(&self) -> ModelMode {
        ModelMode::Deterministic
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn predict_point(&self, z: &LatentPoint, a: DiscreteAction) -> Result<PointPrediction> {
        Ok(self.predict_points(&[z], &[a])?.pop().expect("one prediction"))
    }

    fn predict_points(&self, zs: &[&LatentPoint], actions: &[DiscreteAction]) -> Result<Vec<PointPrediction>> {
        check_dim(zs.len(), actions.len())?;
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.inputs(zs.iter().copied().zip(actions.iter().copied()))?;
        let y = self.net.forward_batch(&x)?;
        let d = self.latent_dim;
        zs.iter()
            .zip(y.rows())
            .map(|(z, out)| {
                let next: Vec<f64> = z.as_slice().iter().zip(out.iter()).map(|(a, b)| a + b).collect();
                Ok(PointPrediction {
                    next: LatentPoint::new(next).map_err(|_| Error::NonFinite("delta model prediction".into()))?,
                    reward: out[d],
                    terminal_prob: sigmoid(out[d + 1]),
                })
            })
            .collect()
    }

    fn predict_distribution(&self, z: &LatentPoint, a: DiscreteAction) -> Result<NextDistribution> {
        let p = self.predict_point(z, a)?;
        Ok(NextDistribution::Gaussian(LatentGaussian::isotropic(p.next, self.sigma2_det)?))
    }

    fn predict_distributions(&self, zs: &[&LatentPoint], actions: &[DiscreteAction]) -> Result<Vec<NextDistribution>> {
        self.predict_points(zs, actions)?
            .into_iter()
            .map(|p| Ok(NextDistribution::Gaussian(LatentGaussian::isotropic(p.next, self.sigma2_det)?)))
            .collect()
    }

    fn outcome_log_prob(&self, record: &TransitionRecord) -> Result<f64> {
        match self.predict_distribution(&record.encoded_state, record.action)? {
            NextDistribution::Gaussian(g) => g.log_density(&record.encoded_next),
            NextDistribution::Categorical { .. } => unreachable!("delta models are Gaussian"),
        }
    }
}

/// A tabular MDP read through an encoder: latents decode to their nearest
/// codebook state.
#[derive(Debug, Clone)]
pub struct TabularModel {
    model_id: usize,
    mdp: TabularMdp,
    encoder: Arc<Encoder>,
    deterministic: bool,
}

impl TabularModel {
    pub fn new(model_id: usize, mdp: TabularMdp, encoder: Arc<Encoder>) -> Result<Self> {
        check_dim(mdp.n_states(), encoder.n_states())?;
        let mut deterministic = true;
        for st in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                deterministic &= mdp.row(st, a)?.iter().all(|&p| p == 0.0 || p == 1.0);
            }
        }
        Ok(Self {
            model_id,
            mdp,
            encoder,
            deterministic,
        })
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn encoder(&self) -> &Arc<Encoder> {
        &self.encoder
    }

    pub fn decode(&self, z: &LatentPoint) -> Result<usize> {
        check_dim(self.encoder.d_latent(), z.dim())?;
        Ok(self.encoder.nearest_state(z)?.0)
    }
}

impl HypothesisModel for TabularModel {
    fn model_id(&self) -> usize {
        self.model_id
    }

    /// Deterministic when every kernel row is one-hot.
    fn mode(&self) -> ModelMode {
        if self.deterministic {
            ModelMode::Deterministic
        } else {
            ModelMode::Stochastic
        }
    }

    fn latent_dim(&self) -> usize {
        self.encoder.d_latent()
    }

    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    /// Encoding of the most likely next state.
    fn predict_point(&self, z: &LatentPoint, a: DiscreteAction) -> Result<PointPrediction> {
        let s = self.decode(z)?;
        let next = self.mdp.argmax_next(s, a.index())?;
        Ok(PointPrediction {
            next: self.encoder.codebook()[next].clone(),
            reward: self.mdp.reward(s, a.index())?,
            terminal_prob: self.mdp.terminal_prob(s, a.index())?,
        })
    }

    fn predict_distribution(&self, z: &LatentPoint, a: DiscreteAction) -> Result<NextDistribution> {
        let s = self.decode(z)?;
        Ok(NextDistribution::Categorical {
            probs: self.mdp.row(s, a.index())?.to_vec(),
        })
    }

    fn outcome_log_prob(&self, record: &TransitionRecord) -> Result<f64> {
        let s = self.decode(&record.encoded_state)?;
        let next = self.decode(&record.encoded_next)?;
        Ok(self.mdp.row(s, record.action.index())?[next].ln())
    }
}

/// The ordered hypothesis set. Ordering decides ties.
#[derive(Debug, Clone)]
pub struct ModelPool<M> {
    models: Vec<M>,
    encoder: Arc<Encoder>,
}

impl<M: HypothesisModel> ModelPool<M> {
    pub fn new(models: Vec<M>, encoder: Arc<Encoder>) -> Result<Self> {
        let first = models.first().ok_or_else(|| Error::invalid("model pool is empty"))?;
        let (d, n_actions) = (first.latent_dim(), first.n_actions());
        check_dim(encoder.d_latent(), d)?;
        for (i, m) in models.iter().enumerate() {
            check_dim(d, m.latent_dim())?;
            check_dim(n_actions, m.n_actions())?;
            if i > 0 && m.model_id() <= models[i - 1].model_id() {
                return Err(Error::invalid("model ids must be strictly increasing in pool order"));
            }
        }
        Ok(Self { models, encoder })
    }

    pub fn models(&self) -> &[M] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn encoder(&self) -> &Arc<Encoder> {
        &self.encoder
    }

    pub fn latent_dim(&self) -> usize {
        self.models[0].latent_dim()
    }

    pub fn n_actions(&self) -> usize {
        self.models[0].n_actions()
    }

    pub fn mode(&self) -> ModelMode {
        if self.models.iter().all(|m| m.mode() == ModelMode::Stochastic) {
            ModelMode::Stochastic
        } else {
            ModelMode::Deterministic
        }
    }

    pub fn position(&self, model_id: usize) -> Option<usize> {
        self.models.iter().position(|m| m.model_id() == model_id)
    }

    pub fn get(&self, model_id: usize) -> Option<&M> {
        self.position(model_id).map(|i| &self.models[i])
    }

    /// Sub-pool of the models at `indices` (kept in pool order).
    pub fn subset(&self, indices: &[usize]) -> Result<ModelPool<M>>
    where
        M: Clone,
    {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        idx.dedup();
        let models = idx
            .iter()
            .map(|&i| self.models.get(i).cloned().ok_or_else(|| Error::invalid(format!("no model at {i}"))))
            .collect::<Result<Vec<_>>>()?;
        ModelPool::new(models, self.encoder.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMetric {
    Mse,
    Nll,
}

/// Mean squared latent error of point predictions on `buffer`.
pub fn fit_score_mse<M: HypothesisModel + ?Sized>(m: &M, buffer: &ExperienceBuffer) -> Result<f64> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let zs: Vec<&LatentPoint> = buffer.iter().map(|r| &r.encoded_state).collect();
    let actions: Vec<DiscreteAction> = buffer.iter().map(|r| r.action).collect();
    let preds = m.predict_points(&zs, &actions)?;
    let mut total = 0.0;
    for (p, r) in preds.iter().zip(buffer.iter()) {
        total += squared_distance(&p.next, &r.encoded_next)?;
    }
    Ok(total / buffer.len() as f64)
}

/// Mean negative log-likelihood of the observed next states, each term
/// clamped at `d_cap` so impossible outcomes stay finite.
pub fn fit_score_nll<M: HypothesisModel + ?Sized>(m: &M, buffer: &ExperienceBuffer, d_cap: f64) -> Result<f64> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let mut total = 0.0;
    for r in buffer.iter() {
        total += clamp_divergence(-m.outcome_log_prob(r)?, d_cap);
    }
    Ok(total / buffer.len() as f64)
}

/// Fit score of every model in pool order.
pub fn fit_scores<M: HypothesisModel>(pool: &ModelPool<M>, buffer: &ExperienceBuffer, metric: FitMetric) -> Result<Vec<f64>> {
    pool.models()
        .iter()
        .map(|m| match metric {
            FitMetric::Mse => fit_score_mse(m, buffer),
            FitMetric::Nll => fit_score_nll(m, buffer, DEFAULT_D_CAP),
        })
        .collect()
}

/// Index in `scores` of the minimum; earliest on ties.
pub fn argmin_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s < scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Id of the best-fitting model; ties go to the lowest id.
pub fn select_model<M: HypothesisModel>(pool: &ModelPool<M>, buffer: &ExperienceBuffer, metric: FitMetric) -> Result<usize> {
    let scores = fit_scores(pool, buffer, metric)?;
    let best = argmin_first(&scores).expect("pool is non-empty");
    Ok(pool.models()[best].model_id())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Weights of the delta, reward and terminal loss terms.
    #[serde(default = "default_loss_weights")]
    pub loss_weights: [f64; 3],
}

fn default_patience() -> usize {
    50
}

fn default_loss_weights() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize) -> Self {
        Self {
            epochs,
            batch_size,
            patience: default_patience(),
            loss_weights: default_loss_weights(),
        }
    }
}

/// Per-epoch mean losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Inputs and targets of a delta model for every record of a buffer.
struct DeltaDataset {
    x: Array2<f64>,
    /// `[delta, reward, terminal]` per row.
    y: Array2<f64>,
}

impl DeltaDataset {
    fn new(model: &LatentDeltaModel, data: &ExperienceBuffer) -> Result<Self> {
        let d = model.latent_dim;
        let x = model.inputs(data.iter().map(|r| (&r.encoded_state, r.action)))?;
        let mut y = Array2::zeros((data.len(), d + 2));
        for (mut row, r) in y.rows_mut().into_iter().zip(data.iter()) {
            check_dim(d, r.encoded_next.dim())?;
            for (k, (a, b)) in r.encoded_next.as_slice().iter().zip(r.encoded_state.as_slice()).enumerate() {
                row[k] = a - b;
            }
            row[d] = r.reward;
            row[d + 1] = if r.terminal { 1.0 } else { 0.0 };
        }
        Ok(Self { x, y })
    }

    fn rows(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (self.x.select(ndarray::Axis(0), idx), self.y.select(ndarray::Axis(0), idx))
    }
}

/// Summed per-example loss and its gradient with respect to the net output
/// (already divided by the batch size).
fn delta_loss(out: &Array2<f64>, target: &Array2<f64>, weights: [f64; 3]) -> (f64, Array2<f64>) {
    let d = out.ncols() - 2;
    let n = out.nrows() as f64;
    let mut grad = Array2::zeros(out.dim());
    let mut total = 0.0;
    for ((o, t), mut g) in out.rows().into_iter().zip(target.rows()).zip(grad.rows_mut()) {
        for k in 0..d {
            let e = o[k] - t[k];
            total += weights[0] * e * e;
            g[k] = weights[0] * 2.0 * e / n;
        }
        let e = o[d] - t[d];
        total += weights[1] * e * e;
        g[d] = weights[1] * 2.0 * e / n;
        let logit = o[d + 1];
        let y = t[d + 1];
        // numerically stable binary cross-entropy on a logit
        total += weights[2] * (logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p());
        g[d + 1] = weights[2] * (sigmoid(logit) - y) / n;
    }
    (total, grad)
}

fn mean_loss(model: &LatentDeltaModel, data: &DeltaDataset, weights: [f64; 3]) -> Result<f64> {
    let out = model.net.forward_batch(&data.x)?;
    Ok(delta_loss(&out, &data.y, weights).0 / data.x.nrows() as f64)
}

/// Minibatch training of a delta model. With a validation buffer, training
/// stops after `patience` epochs without improvement and the best parameters
/// are restored.
pub fn train_delta_model(
    model: &mut LatentDeltaModel,
    data: &ExperienceBuffer,
    validation: Option<&ExperienceBuffer>,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    stream: RngStream,
) -> Result<LossTrace> {
    if data.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let train = DeltaDataset::new(model, data)?;
    let valid = validation.filter(|v| !v.is_empty()).map(|v| DeltaDataset::new(model, v)).transpose()?;
    let mut rng = stream.generator();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = LossTrace::default();
    let mut best: Option<(f64, FeedforwardNet)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.rows(chunk);
            let cache = model.net.forward_cached(&x)?;
            let (loss, grad) = delta_loss(cache.output(), &y, cfg.loss_weights);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss });
            }
            total += loss;
            let grads = model.net.backward(&cache, &grad)?;
            opt.step(&mut model.net, &grads).map_err(|e| match e {
                Error::NonFinite(_) => Error::TrainingDiverged { epoch, loss },
                other => other,
            })?;
        }
        trace.train.push(total / data.len() as f64);
        if let Some(v) = &valid {
            let loss = mean_loss(model, v, cfg.loss_weights)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss });
            }
            trace.validation.push(loss);
            if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                best = Some((loss, model.net.clone()));
                trace.best_epoch = Some(epoch);
            } else if epoch - trace.best_epoch.expect("set with best") >= cfg.patience {
                trace.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, net)) = best {
        model.net = net;
    }
    Ok(trace)
}

/// Fraction of records whose predicted next latent decodes to the same state
/// as the observed one.
pub fn cluster_accuracy<M: HypothesisModel + ?Sized>(m: &M, data: &ExperienceBuffer, encoder: &Encoder) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let zs: Vec<&LatentPoint> = data.iter().map(|r| &r.encoded_state).collect();
    let actions: Vec<DiscreteAction> = data.iter().map(|r| r.action).collect();
    let preds = m.predict_points(&zs, &actions)?;
    let mut hits = 0usize;
    for (p, r) in preds.iter().zip(data.iter()) {
        if encoder.nearest_state(&p.next)?.0 == encoder.nearest_state(&r.encoded_next)?.0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Fraction of records predicted within `radius` of the observed next latent.
pub fn within_radius_fraction<M: HypothesisModel + ?Sized>(m: &M, data: &ExperienceBuffer, radius: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let zs: Vec<&LatentPoint> = data.iter().map(|r| &r.encoded_state).collect();
    let actions: Vec<DiscreteAction> = data.iter().map(|r| r.action).collect();
    let preds = m.predict_points(&zs, &actions)?;
    let mut hits = 0usize;
    for (p, r) in preds.iter().zip(data.iter()) {
        if squared_distance(&p.next, &r.encoded_next)? < radius * radius {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderKind, EncoderSpec, StateUniverse};
    use crate::envs::chain::{ChainTaskSpec, RIGHT};
    use crate::envs::Observation;
    use rand::Rng;

    fn chain_encoder() -> Arc<Encoder> {
        Arc::new(
            Encoder::new(
                EncoderSpec::new(EncoderKind::OneHot, 100, 0),
                StateUniverse::Discrete { n_states: 100 },
            )
            .unwrap(),
        )
    }

    fn chain_pool() -> ModelPool<TabularModel> {
        let enc = chain_encoder();
        let m1 = TabularModel::new(0, ChainTaskSpec::mdp1().to_tabular().unwrap(), enc.clone()).unwrap();
        let m2 = TabularModel::new(1, ChainTaskSpec::mdp2().to_tabular().unwrap(), enc.clone()).unwrap();
        ModelPool::new(vec![m1, m2], enc).unwrap()
    }

    fn discrete_record(enc: &Encoder, s: usize, a: DiscreteAction, next: usize) -> TransitionRecord {
        let state = Observation::Discrete { id: s };
        let next_state = Observation::Discrete { id: next };
        TransitionRecord {
            encoded_state: enc.encode(&state).unwrap(),
            encoded_next: enc.encode(&next_state).unwrap(),
            state,
            action: a,
            reward: 0.0,
            next_state,
            terminal: false,
        }
    }

    /// `n` draws of the (50, right) transition from a chain MDP (0-based id 49).
    fn informative_buffer(task: &ChainTaskSpec, enc: &Encoder, n: usize, seed: u64) -> ExperienceBuffer {
        let mut rng = RngStream::new(seed, 0).generator();
        (0..n)
            .map(|_| {
                let moved = rng.gen::<f64>() < task.right_success(50);
                discrete_record(enc, 49, RIGHT, if moved { 50 } else { 49 })
            })
            .collect()
    }

    fn latent(v: &[f64]) -> LatentPoint {
        LatentPoint::new(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_delta_model_is_identity() {
        let net = FeedforwardNet::zeros(&[3 + 2, 4, 4, 5]).unwrap();
        let m = LatentDeltaModel::from_net(0, 3, 2, net).unwrap();
        let z = latent(&[0.3, -1.0, 2.0]);
        let p = m.predict_point(&z, DiscreteAction(1)).unwrap();
        assert_eq!(p.next, z);
        assert_eq!(p.reward, 0.0);
        assert_eq!(p.terminal_prob, 0.5);
        assert!(m.predict_point(&latent(&[0.0]), DiscreteAction(0)).is_err());
        assert!(m.predict_point(&z, DiscreteAction(2)).is_err());
    }

    #[test]
    fn batched_predictions_match_single() {
        let m = LatentDeltaModel::new(0, 4, 3, RngStream::new(1, 1)).unwrap();
        let mut rng = RngStream::new(1, 2).generator();
        let zs: Vec<LatentPoint> = (0..7).map(|_| latent(&(0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())).collect();
        let acts: Vec<DiscreteAction> = (0..7).map(|i| DiscreteAction(i % 3)).collect();
        let refs: Vec<&LatentPoint> = zs.iter().collect();
        let batch = m.predict_points(&refs, &acts).unwrap();
        for ((z, a), b) in zs.iter().zip(&acts).zip(&batch) {
            let single = m.predict_point(z, *a).unwrap();
            for (x, y) in single.next.as_slice().iter().zip(b.next.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrapped_gaussian_is_centered_on_point() {
        let m = LatentDeltaModel::new(0, 4, 2, RngStream::new(2, 2)).unwrap();
        let mut rng = RngStream::new(2, 3).generator();
        for _ in 0..1000 {
            let z = latent(&(0..4).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>());
            let a = DiscreteAction(rng.gen_range(0..2));
            let NextDistribution::Gaussian(g) = m.predict_distribution(&z, a).unwrap() else {
                panic!("expected a Gaussian")
            };
            assert_eq!(g.mean(), &m.predict_point(&z, a).unwrap().next);
            assert!(g.variance().iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn tabular_prediction_semantics() {
        let pool = chain_pool();
        let enc = pool.encoder().clone();
        let z50 = enc.codebook()[49].clone();
        let NextDistribution::Categorical { probs } = pool.models()[0].predict_distribution(&z50, RIGHT).unwrap() else {
            panic!("expected categorical")
        };
        assert_eq!(probs[50], 0.1);
        assert_eq!(probs[49], 0.9);
        // argmax: stay under MDP 1, move under MDP 2
        assert_eq!(pool.models()[0].predict_point(&z50, RIGHT).unwrap().next, enc.codebook()[49]);
        assert_eq!(pool.models()[1].predict_point(&z50, RIGHT).unwrap().next, enc.codebook()[50]);
    }

    #[test]
    fn mse_examples() {
        let enc = chain_encoder();
        let pool = chain_pool();
        // a model scored on its own point predictions
        let m = &pool.models()[1];
        let buf: ExperienceBuffer = (0..100)
            .map(|s| {
                let z = enc.codebook()[s].clone();
                let p = m.predict_point(&z, RIGHT).unwrap();
                let next = enc.nearest_state(&p.next).unwrap().0;
                discrete_record(&enc, s, RIGHT, next)
            })
            .collect();
        assert_eq!(fit_score_mse(m, &buf).unwrap(), 0.0);
        // one record off by a unit vector
        let net = FeedforwardNet::zeros(&[2 + 1, 3, 3, 4]).unwrap();
        let zero = LatentDeltaModel::from_net(0, 2, 1, net).unwrap();
        let rec = TransitionRecord {
            state: Observation::Discrete { id: 0 },
            action: DiscreteAction(0),
            reward: 0.0,
            next_state: Observation::Discrete { id: 0 },
            terminal: false,
            encoded_state: latent(&[0.0, 0.0]),
            encoded_next: latent(&[1.0, 0.0]),
        };
        let single: ExperienceBuffer = std::iter::once(rec).collect();
        assert_eq!(fit_score_mse(&zero, &single).unwrap(), 1.0);
        assert!(matches!(fit_score_mse(&zero, &ExperienceBuffer::new()), Err(Error::EmptyBuffer)));
    }

    #[test]
    fn nll_examples() {
        let enc = chain_encoder();
        // deterministic left transitions have probability one
        let pool = chain_pool();
        let buf: ExperienceBuffer = (1..100)
            .map(|s| discrete_record(&enc, s, crate::envs::chain::LEFT, s - 1))
            .collect();
        assert_eq!(fit_score_nll(&pool.models()[0], &buf, DEFAULT_D_CAP).unwrap(), 0.0);
        // a fair coin
        let mut coin_task = ChainTaskSpec::mdp1();
        coin_task.right_success_at_informative = 0.5;
        let coin = TabularModel::new(0, coin_task.to_tabular().unwrap(), enc.clone()).unwrap();
        let buf: ExperienceBuffer = [49, 50]
            .iter()
            .map(|&next| discrete_record(&enc, 49, RIGHT, next))
            .collect();
        assert!((fit_score_nll(&coin, &buf, DEFAULT_D_CAP).unwrap() - 2f64.ln()).abs() < 1e-12);
        // impossible outcome is clamped
        let buf: ExperienceBuffer = std::iter::once(discrete_record(&enc, 10, crate::envs::chain::LEFT, 20)).collect();
        assert_eq!(fit_score_nll(&coin, &buf, DEFAULT_D_CAP).unwrap(), DEFAULT_D_CAP);
    }

    #[test]
    fn select_model_tie_and_singleton() {
        let enc = chain_encoder();
        let m = TabularModel::new(0, ChainTaskSpec::mdp1().to_tabular().unwrap(), enc.clone()).unwrap();
        let twin = TabularModel::new(3, ChainTaskSpec::mdp1().to_tabular().unwrap(), enc.clone()).unwrap();
        let buf = informative_buffer(&ChainTaskSpec::mdp2(), &enc, 5, 0);
        let single = ModelPool::new(vec![m.clone()], enc.clone()).unwrap();
        assert_eq!(select_model(&single, &buf, FitMetric::Mse).unwrap(), 0);
        let twins = ModelPool::new(vec![m, twin], enc.clone()).unwrap();
        assert_eq!(select_model(&twins, &buf, FitMetric::Nll).unwrap(), 0);
        assert_eq!(select_model(&twins, &buf, FitMetric::Mse).unwrap(), 0);
    }

    #[test]
    fn pool_rejects_unordered_ids() {
        let enc = chain_encoder();
        let m = TabularModel::new(2, ChainTaskSpec::mdp1().to_tabular().unwrap(), enc.clone()).unwrap();
        let n = TabularModel::new(1, ChainTaskSpec::mdp2().to_tabular().unwrap(), enc.clone()).unwrap();
        assert!(ModelPool::new(vec![m, n], enc.clone()).is_err());
        assert!(ModelPool::<TabularModel>::new(vec![], enc).is_err());
    }

    #[test]
    fn informative_outcomes_identify_the_chain() {
        let pool = chain_pool();
        let enc = pool.encoder().clone();
        let runs = 1000;
        let correct = (0..runs)
            .filter(|seed| {
                let buf = informative_buffer(&ChainTaskSpec::mdp2(), &enc, 20, *seed);
                select_model(&pool, &buf, FitMetric::Nll).unwrap() == 1
            })
            .count();
        assert!(correct as f64 / runs as f64 >= 0.99, "{correct}");
    }

    #[test]
    fn mse_ranks_chain_models() {
        // 50 transitions from MDP 1 with at least 5 informative visits
        let pool = chain_pool();
        let enc = pool.encoder().clone();
        let task = ChainTaskSpec::mdp1();
        let mut wins = 0;
        for seed in 0..100u64 {
            let mut rng = RngStream::new(seed, 7).generator();
            let mut buf = informative_buffer(&task, &enc, 5, seed);
            while buf.len() < 50 {
                let s = rng.gen_range(1..=100);
                let a = DiscreteAction(rng.gen_range(0..2));
                let (n, _, _) = crate::envs::chain::chain_step(&task, s, a, &mut rng).unwrap();
                buf.push(discrete_record(&enc, s - 1, a, n - 1)).unwrap();
            }
            let scores = fit_scores(&pool, &buf, FitMetric::Mse).unwrap();
            if scores[0] < scores[1] {
                wins += 1;
            }
        }
        assert!(wins >= 99, "{wins}");
    }

    /// Exact log-likelihood of a buffer under a tabular model, straight from the kernel.
    fn exact_log_likelihood(mdp: &TabularMdp, buf: &ExperienceBuffer) -> f64 {
        buf.iter()
            .map(|r| mdp.row(r.state.state_id(), r.action.index()).unwrap()[r.next_state.state_id()].ln())
            .sum()
    }

    #[test]
    fn nll_selection_is_maximum_likelihood() {
        let n = 5;
        let enc = Arc::new(
            Encoder::new(EncoderSpec::new(EncoderKind::OneHot, n, 0), StateUniverse::Discrete { n_states: n }).unwrap(),
        );
        let mut rng = RngStream::new(11, 0).generator();
        let random_mdp = |rng: &mut rand_chacha::ChaCha8Rng| {
            let rows = (0..n * 2)
                .map(|_| {
                    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
                    let t: f64 = w.iter().sum();
                    let mut row: Vec<f64> = w.iter().map(|x| x / t).collect();
                    let drift: f64 = row.iter().sum::<f64>() - 1.0;
                    row[0] -= drift;
                    row
                })
                .collect();
            TabularMdp::new(n, 2, rows, vec![0.0; n * 2], vec![0.0; n * 2]).unwrap()
        };
        for _ in 0..100 {
            let a = random_mdp(&mut rng);
            let b = random_mdp(&mut rng);
            let pool = ModelPool::new(
                vec![
                    TabularModel::new(0, a.clone(), enc.clone()).unwrap(),
                    TabularModel::new(1, b.clone(), enc.clone()).unwrap(),
                ],
                enc.clone(),
            )
            .unwrap();
            let truth = if rng.gen_bool(0.5) { &a } else { &b };
            let buf: ExperienceBuffer = (0..10)
                .map(|_| {
                    let s = rng.gen_range(0..n);
                    let act = DiscreteAction(rng.gen_range(0..2));
                    let next = truth.sample_next(s, act.index(), &mut rng).unwrap();
                    discrete_record(&enc, s, act, next)
                })
                .collect();
            let (la, lb) = (exact_log_likelihood(&a, &buf), exact_log_likelihood(&b, &buf));
            let expected = if lb > la { 1 } else { 0 };
            assert_eq!(select_model(&pool, &buf, FitMetric::Nll).unwrap(), expected);
        }
    }

    /// A model seen through the latent map `z -> c z`.
    struct Rescaled<'a>(&'a LatentDeltaModel, f64);

    impl HypothesisModel for Rescaled<'_> {
        fn model_id(&self) -> usize {
            self.0.model_id()
        }
        fn mode(&self) -> ModelMode {
            self.0.mode()
        }
        fn latent_dim(&self) -> usize {
            self.0.latent_dim()
        }
        fn n_actions(&self) -> usize {
            self.0.n_actions()
        }
        fn predict_point(&self, z: &LatentPoint, a: DiscreteAction) -> Result<PointPrediction> {
            let mut p = self.0.predict_point(&z.scaled(1.0 / self.1)?, a)?;
            p.next = p.next.scaled(self.1)?;
            Ok(p)
        }
        fn predict_distribution(&self, z: &LatentPoint, a: DiscreteAction) -> Result<NextDistribution> {
            self.0.predict_distribution(z, a)
        }
        fn outcome_log_prob(&self, record: &TransitionRecord) -> Result<f64> {
            self.0.outcome_log_prob(record)
        }
    }

    #[test]
    fn selection_invariant_to_latent_rescaling() {
        let models: Vec<LatentDeltaModel> = (0..3)
            .map(|i| LatentDeltaModel::new(i, 3, 2, RngStream::new(5, i as u64)).unwrap())
            .collect();
        let mut rng = RngStream::new(5, 9).generator();
        for trial in 0..20 {
            let truth = &models[trial % 3];
            let buf: ExperienceBuffer = (0..20)
                .map(|_| {
                    let z = latent(&(0..3).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
                    let a = DiscreteAction(rng.gen_range(0..2));
                    let next = truth.predict_point(&z, a).unwrap().next;
                    let noisy = latent(&next.as_slice().iter().map(|x| x + rng.gen_range(-0.3..0.3)).collect::<Vec<_>>());
                    TransitionRecord {
                        state: Observation::Discrete { id: 0 },
                        action: a,
                        reward: 0.0,
                        next_state: Observation::Discrete { id: 0 },
                        terminal: false,
                        encoded_state: z,
                        encoded_next: noisy,
                    }
                })
                .collect();
            let c = rng.gen_range(0.1..10.0);
            let scaled: ExperienceBuffer = buf
                .iter()
                .map(|r| TransitionRecord {
                    encoded_state: r.encoded_state.scaled(c).unwrap(),
                    encoded_next: r.encoded_next.scaled(c).unwrap(),
                    ..r.clone()
                })
                .collect();
            let plain: Vec<f64> = models.iter().map(|m| fit_score_mse(m, &buf).unwrap()).collect();
            let rescaled: Vec<f64> = models.iter().map(|m| fit_score_mse(&Rescaled(m, c), &scaled).unwrap()).collect();
            assert_eq!(argmin_first(&plain), argmin_first(&rescaled));
            for (p, q) in plain.iter().zip(&rescaled) {
                assert!((p * c * c - q).abs() <= 1e-9 * q.max(1.0));
            }
        }
    }

    pub(super) fn identity_buffer(n: usize, d: usize, n_actions: usize, seed: u64) -> ExperienceBuffer {
        let mut rng = RngStream::new(seed, 0).generator();
        (0..n)
            .map(|_| {
                let z = latent(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
                TransitionRecord {
                    state: Observation::Discrete { id: 0 },
                    action: DiscreteAction(rng.gen_range(0..n_actions)),
                    reward: 0.0,
                    next_state: Observation::Discrete { id: 0 },
                    terminal: false,
                    encoded_next: z.clone(),
                    encoded_state: z,
                }
            })
            .collect()
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = LatentDeltaModel::new(0, 4, 2, RngStream::new(0, 0)).unwrap();
        let before = m.clone();
        let data = identity_buffer(10, 4, 2, 0);
        let mut opt = OptimizerState::adam(1e-3).unwrap();
        let trace = train_delta_model(&mut m, &data, None, &mut opt, &TrainConfig::new(0, 4), RngStream::new(0, 1)).unwrap();
        assert!(trace.train.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn identity_training_shrinks_deltas() {
        let d = 8;
        let mut m = LatentDeltaModel::new(0, d, 3, RngStream::new(3, 0)).unwrap();
        let data = identity_buffer(1000, d, 3, 3);
        let mut opt = OptimizerState::adam(1e-2).unwrap();
        // full-batch: 500 epochs are 500 optimizer steps
        let trace = train_delta_model(&mut m, &data, None, &mut opt, &TrainConfig::new(500, 1000), RngStream::new(3, 1)).unwrap();
        assert_eq!(opt.step_count(), 500);
        let mean_norm: f64 = data
            .iter()
            .map(|r| {
                let p = m.predict_point(&r.encoded_state, r.action).unwrap();
                squared_distance(&p.next, &r.encoded_state).unwrap().sqrt()
            })
            .sum::<f64>()
            / data.len() as f64;
        assert!(mean_norm < 1e-2, "{mean_norm}");
        assert_eq!(trace.train.len(), 500);
    }

    #[test]
    fn epoch_losses_do_not_increase() {
        let data = identity_buffer(1000, 8, 3, 21);
        let mut m = LatentDeltaModel::new(0, 8, 3, RngStream::new(21, 0)).unwrap();
        let mut opt = OptimizerState::adam(1e-3).unwrap();
        let trace = train_delta_model(&mut m, &data, None, &mut opt, &TrainConfig::new(50, 100), RngStream::new(21, 1)).unwrap();
        let mut best = f64::INFINITY;
        for loss in &trace.train {
            assert!(*loss <= best * 1.05, "{:?}", trace.train);
            best = best.min(*loss);
        }
        assert!(trace.train.last().unwrap() < &(trace.train[0] * 0.1));
    }

    #[test]
    fn training_is_deterministic_and_early_stops() {
        let data = identity_buffer(64, 3, 2, 9);
        let valid = identity_buffer(16, 3, 2, 10);
        let run = || {
            let mut m = LatentDeltaModel::new(0, 3, 2, RngStream::new(4, 0)).unwrap();
            let mut opt = OptimizerState::adam(1e-2).unwrap();
            let cfg = TrainConfig {
                patience: 3,
                ..TrainConfig::new(400, 16)
            };
            let trace = train_delta_model(&mut m, &data, Some(&valid), &mut opt, &cfg, RngStream::new(4, 1)).unwrap();
            (m.net().to_bytes(), trace)
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert!(ta.stopped_early);
        assert!(ta.validation.len() < 400);
    }

    #[test]
    fn diverging_training_is_reported() {
        let mut data = identity_buffer(8, 2, 2, 1);
        let huge: ExperienceBuffer = data
            .iter()
            .map(|r| TransitionRecord {
                reward: 1e300,
                ..r.clone()
            })
            .collect();
        data = huge;
        let mut m = LatentDeltaModel::new(0, 2, 2, RngStream::new(0, 0)).unwrap();
        let mut opt = OptimizerState::sgd(1.0).unwrap();
        let err = train_delta_model(&mut m, &data, None, &mut opt, &TrainConfig::new(5, 4), RngStream::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { epoch: 0, .. }), "{err}");
    }
}
