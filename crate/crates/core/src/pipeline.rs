//! Meta-training and adaptation trials on Alchemy.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{select_model, train_delta_model, FitMetric, HypothesisModel, LatentDeltaModel, LossTrace, ModelPool, TrainConfig};
use crate::encoder::{Encoder, EncoderSpec, StateUniverse};
use crate::envs::alchemy::{derive_adaptation_task, optimal_return, sample_meta_tasks};
use crate::envs::{AlchemyEnv, AlchemyTaskSpec, Environment, StartRule};
use crate::nn::{FeedforwardNet, OptimizerState};
use crate::planning::{
    etc_select, hype_select, mpc_act, step_and_record, AdoptionMonitor, MonitorDecision, MpcConfig, PlannerConfig,
};
use crate::primitives::{streams, ExperienceBuffer, RngStream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaTrainConfig {
    pub n_tasks: usize,
    pub transitions_per_task: usize,
    pub validation_per_task: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_patience() -> usize {
    50
}

impl MetaTrainConfig {
    pub fn desk() -> Self {
        Self {
            n_tasks: 6,
            transitions_per_task: 6400,
            validation_per_task: 256,
            epochs: 300,
            batch_size: 512,
            learning_rate: 5e-5,
            patience: default_patience(),
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            transitions_per_task: 25_600,
            validation_per_task: 512,
            epochs: 1000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_tasks", self.n_tasks),
            ("transitions_per_task", self.transitions_per_task),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(format!("meta_train.{name}"), "must be at least 1"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("meta_train.learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Random-policy transitions on `task`, starting a new episode whenever one ends.
pub fn collect_random_transitions(task: &AlchemyTaskSpec, encoder: &Encoder, n: usize, stream: RngStream) -> Result<ExperienceBuffer> {
    let mut env = AlchemyEnv::new(task.clone(), StartRule::Uniform, stream.derive(streams::ENV))?;
    let mut rng = stream.derive(streams::ACTOR).generator();
    let mut buffer = ExperienceBuffer::new();
    while buffer.len() < n {
        let a = crate::primitives::DiscreteAction(rng.gen_range(0..env.n_actions()));
        let (record, outcome) = step_and_record(&mut env, encoder, a)?;
        buffer.push(record)?;
        if outcome.done() {
            env.reset();
        }
    }
    Ok(buffer)
}

#[derive(Debug, Clone)]
pub struct TrainedPool {
    pub pool: ModelPool<LatentDeltaModel>,
    /// Task of each model, in pool order.
    pub tasks: Vec<AlchemyTaskSpec>,
    pub traces: Vec<LossTrace>,
}

/// Sample the meta-training tasks and fit one delta model per task.
pub fn meta_train(cfg: &MetaTrainConfig, n_features: usize, encoder: Arc<Encoder>, seed: u64) -> Result<TrainedPool> {
    cfg.validate()?;
    let tasks = sample_meta_tasks(cfg.n_tasks, n_features, RngStream::new(seed, streams::TASKS))?;
    let n_actions = n_features + 1;
    let d = encoder.d_latent();
    let trained: Vec<(LatentDeltaModel, LossTrace)> = tasks
        .par_iter()
        .map(|task| {
            let id = task.task_id as u64;
            let data_stream = RngStream::new(seed, streams::DATA).derive(id);
            let data = collect_random_transitions(task, &encoder, cfg.transitions_per_task, data_stream.derive(0))?;
            let validation = if cfg.validation_per_task > 0 {
                Some(collect_random_transitions(task, &encoder, cfg.validation_per_task, data_stream.derive(1))?)
            } else {
                None
            };
            let mut model = LatentDeltaModel::new(task.task_id, d, n_actions, RngStream::new(seed, streams::INIT).derive(id))?;
            let mut opt = OptimizerState::adam(cfg.learning_rate)?;
            let train_cfg = TrainConfig {
                patience: cfg.patience,
                ..TrainConfig::new(cfg.epochs, cfg.batch_size)
            };
            let trace = train_delta_model(
                &mut model,
                &data,
                validation.as_ref(),
                &mut opt,
                &train_cfg,
                RngStream::new(seed, streams::TRAINER).derive(id),
            )
            .map_err(|e| match e {
                Error::TrainingDiverged { epoch, loss } => Error::TaskTrainingDiverged {
                    task_id: task.task_id,
                    epoch,
                    loss,
                },
                other => other,
            })?;
            Ok((model, trace))
        })
        .collect::<Result<_>>()?;
    let (models, traces): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    Ok(TrainedPool {
        pool: ModelPool::new(models, encoder)?,
        tasks,
        traces,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub return_: f64,
    pub optimal_return: f64,
    pub normalized_return: f64,
    pub steps: usize,
}

/// One MPC episode on `env` (reset first). Transitions are appended to
/// `buffer` when given.
pub fn run_mpc_episode<M: HypothesisModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    env: &mut AlchemyEnv,
    encoder: &Encoder,
    mpc: &MpcConfig,
    rng: &mut R,
    mut buffer: Option<&mut ExperienceBuffer>,
) -> Result<EpisodeOutcome> {
    env.reset();
    let optimal = optimal_return(env.task(), &env.state());
    let mut total = 0.0;
    let mut steps = 0;
    loop {
        let z = encoder.encode(&env.observe())?;
        let a = mpc_act(model, &z, mpc, rng)?;
        let (record, outcome) = step_and_record(env, encoder, a)?;
        if let Some(b) = buffer.as_deref_mut() {
            b.push(record)?;
        }
        total += outcome.reward;
        steps += 1;
        if outcome.done() {
            break;
        }
    }
    Ok(EpisodeOutcome {
        return_: total,
        optimal_return: optimal,
        normalized_return: normalized(total, optimal),
        steps,
    })
}

/// Return as a fraction of the optimal return; 0 when nothing positive is
/// attainable.
pub fn normalized(ret: f64, optimal: f64) -> f64 {
    if optimal > 0.0 {
        ret / optimal
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OwnTaskScore {
    pub model_id: usize,
    pub mean_normalized_return: f64,
    pub mean_steps: f64,
}

/// Each model acting by MPC on its own training task.
pub fn evaluate_own_tasks(trained: &TrainedPool, mpc: &MpcConfig, episodes: usize, seed: u64) -> Result<Vec<OwnTaskScore>> {
    trained
        .pool
        .models()
        .par_iter()
        .zip(&trained.tasks)
        .map(|(model, task)| {
            let stream = RngStream::new(seed, streams::EVAL).derive(task.task_id as u64);
            let mut env = AlchemyEnv::new(task.clone(), StartRule::Uniform, stream.derive(streams::ENV))?;
            let mut rng = stream.derive(streams::ACTOR).generator();
            let mut norm = 0.0;
            let mut steps = 0.0;
            for _ in 0..episodes {
                let e = run_mpc_episode(model, &mut env, trained.pool.encoder(), mpc, &mut rng, None)?;
                norm += e.normalized_return;
                steps += e.steps as f64;
            }
            Ok(OwnTaskScore {
                model_id: model.model_id(),
                mean_normalized_return: norm / episodes as f64,
                mean_steps: steps / episodes as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Hype,
    Etc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Hype => "hype",
            Method::Etc => "etc",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hype" => Ok(Method::Hype),
            "etc" => Ok(Method::Etc),
            other => Err(Error::config("adapt.method", format!("expected `hype` or `etc`, got `{other}`"))),
        }
    }
}

fn default_monitor_window() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub n_trials: usize,
    pub episodes_per_trial: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub method: Method,
    #[serde(default = "default_monitor_window")]
    pub monitor_window: usize,
    /// Windowed MSE above which the adopted model is dropped; `None` means `tol²`.
    #[serde(default)]
    pub monitor_threshold: Option<f64>,
}

impl AdaptConfig {
    pub fn new(method: Method) -> Self {
        Self {
            n_trials: 40,
            episodes_per_trial: 8,
            learning_rate: 1e-5,
            batch_size: 16,
            method,
            monitor_window: default_monitor_window(),
            monitor_threshold: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_trials", self.n_trials),
            ("episodes_per_trial", self.episodes_per_trial),
            ("batch_size", self.batch_size),
            ("monitor_window", self.monitor_window),
        ] {
            if v == 0 {
                return Err(Error::config(format!("adapt.{name}"), "must be at least 1"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("adapt.learning_rate", "must be positive"));
        }
        if let Some(t) = self.monitor_threshold {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::config("adapt.monitor_threshold", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial_id: usize,
    pub method: Method,
    pub true_base_task_id: usize,
    pub selected_model_id: usize,
    pub correct_selection: bool,
    pub experiment: Vec<usize>,
    pub degenerate: bool,
    pub returns: Vec<f64>,
    pub normalized_returns: Vec<f64>,
    pub steps_per_episode: Vec<usize>,
    pub episodes_to_exceed_02: Option<usize>,
    pub episodes_to_exceed_08: Option<usize>,
    pub reselections: usize,
    /// Environment steps spent choosing the model.
    pub selection_steps: usize,
}

/// First episode (1-based) whose normalized return exceeds `threshold`.
pub fn episodes_to_exceed(normalized: &[f64], threshold: f64) -> Option<usize> {
    normalized.iter().position(|r| *r > threshold).map(|i| i + 1)
}

/// One SGD pass over `buffer` in shuffled minibatches.
fn fine_tune<R: Rng + ?Sized>(model: &mut LatentDeltaModel, buffer: &ExperienceBuffer, cfg: &AdaptConfig, rng: &mut R) -> Result<()> {
    let mut opt = OptimizerState::sgd(cfg.learning_rate)?;
    let train_cfg = TrainConfig {
        patience: usize::MAX,
        ..TrainConfig::new(1, cfg.batch_size)
    };
    train_delta_model(model, buffer, None, &mut opt, &train_cfg, RngStream::new(rng.gen(), streams::TRAINER))?;
    Ok(())
}

/// Adapt to an unseen variant of `base` (one extra blocked transition):
/// select a model, then act by MPC for `cfg.episodes_per_trial` episodes,
/// fine-tuning once per episode on everything collected. When the adopted
/// model's recent predictions go wrong it is dropped and the best fit on the
/// full buffer is adopted instead.
#[allow(clippy::too_many_arguments)]
pub fn run_adaptation_trial(
    pool: &ModelPool<LatentDeltaModel>,
    base: &AlchemyTaskSpec,
    cfg: &AdaptConfig,
    planner: &PlannerConfig,
    mpc: &MpcConfig,
    metric: FitMetric,
    trial_id: usize,
    seed: u64,
) -> Result<TrialResult> {
    cfg.validate()?;
    let stream = RngStream::new(seed, streams::TRIALS).derive(trial_id as u64);
    let adaptation = derive_adaptation_task(base, stream.derive(streams::TASKS))?;
    let encoder = pool.encoder().clone();
    let mut env = AlchemyEnv::new(adaptation.task.clone(), StartRule::Uniform, stream.derive(streams::ENV))?;
    let mut planner_rng = stream.derive(streams::PLANNER).generator();
    let mut actor_rng = stream.derive(streams::ACTOR).generator();
    let mut trainer_rng = stream.derive(streams::TRAINER).generator();

    let selection = match cfg.method {
        Method::Hype => hype_select(pool, &mut env, planner, metric, &mut planner_rng)?,
        Method::Etc => etc_select(pool, &mut env, planner.k, metric, &mut planner_rng)?,
    };
    let selection_steps = env.total_steps();
    let first_choice = selection.model_id;
    let mut buffer = selection.buffer;
    let mut adopted = pool.get(first_choice).expect("selected from pool").clone();

    let tol = planner.separation.resolved_tol(&encoder);
    let mut monitor = AdoptionMonitor::new(cfg.monitor_window, cfg.monitor_threshold.unwrap_or(tol * tol))?;
    monitor.adopt(first_choice);
    let mut reselections = 0;

    let mut returns = Vec::with_capacity(cfg.episodes_per_trial);
    let mut normalized_returns = Vec::with_capacity(cfg.episodes_per_trial);
    let mut steps_per_episode = Vec::with_capacity(cfg.episodes_per_trial);
    for _ in 0..cfg.episodes_per_trial {
        env.reset();
        let optimal = optimal_return(env.task(), &env.state());
        let mut total = 0.0;
        let mut steps = 0;
        let mut since_adoption = 0;
        loop {
            let z = encoder.encode(&env.observe())?;
            let a = mpc_act(&adopted, &z, mpc, &mut actor_rng)?;
            let (record, outcome) = step_and_record(&mut env, &encoder, a)?;
            buffer.push(record)?;
            total += outcome.reward;
            steps += 1;
            since_adoption += 1;
            if outcome.done() {
                break;
            }
            let recent = buffer.tail(since_adoption.min(buffer.len()));
            if monitor.check(recent, &adopted)? == MonitorDecision::Unadopt {
                let id = select_model(pool, &buffer, metric)?;
                if id != monitor.model_id.expect("adopted") {
                    adopted = pool.get(id).expect("selected from pool").clone();
                    fine_tune(&mut adopted, &buffer, cfg, &mut trainer_rng)?;
                }
                monitor.adopt(id);
                reselections += 1;
                since_adoption = 0;
            }
        }
        fine_tune(&mut adopted, &buffer, cfg, &mut trainer_rng)?;
        returns.push(total);
        normalized_returns.push(normalized(total, optimal));
        steps_per_episode.push(steps);
    }
    Ok(TrialResult {
        trial_id,
        method: cfg.method,
        true_base_task_id: adaptation.closest_task_id,
        selected_model_id: first_choice,
        correct_selection: first_choice == adaptation.closest_task_id,
        experiment: selection.executed.iter().map(|a| a.index()).collect(),
        degenerate: selection.degenerate,
        episodes_to_exceed_02: episodes_to_exceed(&normalized_returns, 0.2),
        episodes_to_exceed_08: episodes_to_exceed(&normalized_returns, 0.8),
        returns,
        normalized_returns,
        steps_per_episode,
        reselections,
        selection_steps,
    })
}

/// Base task of each trial, drawn uniformly from the pool's tasks.
pub fn trial_base_tasks(n_trials: usize, n_tasks: usize, seed: u64) -> Vec<usize> {
    let mut rng = RngStream::new(seed, streams::TRIALS).derive(u64::MAX).generator();
    (0..n_trials).map(|_| rng.gen_range(0..n_tasks)).collect()
}

/// All trials of one method, in trial order. Trials run in parallel.
pub fn run_adaptation(
    trained: &TrainedPool,
    cfg: &AdaptConfig,
    planner: &PlannerConfig,
    mpc: &MpcConfig,
    seed: u64,
) -> Result<Vec<TrialResult>> {
    let bases = trial_base_tasks(cfg.n_trials, trained.tasks.len(), seed);
    bases
        .par_iter()
        .enumerate()
        .map(|(trial_id, &b)| run_adaptation_trial(&trained.pool, &trained.tasks[b], cfg, planner, mpc, FitMetric::Mse, trial_id, seed))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: usize,
    pub mean_normalized_return: f64,
    pub std_normalized_return: f64,
    pub mean_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub n_trials: usize,
    pub selection_accuracy: f64,
    pub correct_selections: usize,
    pub per_episode: Vec<EpisodeStats>,
    /// Trials that ever exceeded 0.2 / 0.8 normalized return.
    pub trials_exceeding_02: usize,
    pub trials_exceeding_08: usize,
    /// Mean first episode exceeding the threshold, over trials that do.
    pub mean_episodes_to_02: Option<f64>,
    pub mean_episodes_to_08: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-episode statistics and selection/threshold counts for one method.
pub fn aggregate(results: &[TrialResult]) -> Result<Summary> {
    let first = results.first().ok_or_else(|| Error::invalid("no trial results to aggregate"))?;
    if results.iter().any(|r| r.method != first.method) {
        return Err(Error::invalid("cannot aggregate trials of different methods"));
    }
    let mut sorted: Vec<&TrialResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.trial_id);
    let n_episodes = sorted.iter().map(|r| r.normalized_returns.len()).min().unwrap_or(0);
    let per_episode = (0..n_episodes)
        .map(|e| {
            let norm: Vec<f64> = sorted.iter().map(|r| r.normalized_returns[e]).collect();
            let steps: Vec<f64> = sorted.iter().map(|r| r.steps_per_episode[e] as f64).collect();
            let (mean, std) = mean_std(&norm);
            EpisodeStats {
                episode: e + 1,
                mean_normalized_return: mean,
                std_normalized_return: std,
                mean_steps: mean_std(&steps).0,
            }
        })
        .collect();
    let correct = sorted.iter().filter(|r| r.correct_selection).count();
    let crossing = |f: fn(&TrialResult) -> Option<usize>| {
        let hits: Vec<f64> = sorted.iter().filter_map(|r| f(r)).map(|e| e as f64).collect();
        let mean = (!hits.is_empty()).then(|| mean_std(&hits).0);
        (hits.len(), mean)
    };
    let (n02, m02) = crossing(|r| r.episodes_to_exceed_02);
    let (n08, m08) = crossing(|r| r.episodes_to_exceed_08);
    Ok(Summary {
        method: first.method,
        n_trials: sorted.len(),
        selection_accuracy: correct as f64 / sorted.len() as f64,
        correct_selections: correct,
        per_episode,
        trials_exceeding_02: n02,
        trials_exceeding_08: n08,
        mean_episodes_to_02: m02,
        mean_episodes_to_08: m08,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub model_id: usize,
    pub task_id: usize,
    pub checkpoint: String,
    pub task_file: String,
}

/// Index of a pool checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolManifest {
    pub n_features: usize,
    pub latent_dim: usize,
    pub n_actions: usize,
    pub sigma2_det: f64,
    pub encoder: EncoderSpec,
    pub models: Vec<ManifestEntry>,
}

/// Write one checkpoint and one task file per model plus the manifest.
pub fn save_pool(dir: &Path, trained: &TrainedPool) -> Result<PoolManifest> {
    std::fs::create_dir_all(dir)?;
    let pool = &trained.pool;
    let mut entries = Vec::with_capacity(pool.len());
    for (model, task) in pool.models().iter().zip(&trained.tasks) {
        let checkpoint = format!("model_{}.bin", model.model_id());
        let task_file = format!("task_{}.json", task.task_id);
        model.net().save(&dir.join(&checkpoint))?;
        std::fs::write(dir.join(&task_file), serde_json::to_string_pretty(task)? + "\n")?;
        entries.push(ManifestEntry {
            model_id: model.model_id(),
            task_id: task.task_id,
            checkpoint,
            task_file,
        });
    }
    let manifest = PoolManifest {
        n_features: trained.tasks[0].n_features,
        latent_dim: pool.latent_dim(),
        n_actions: pool.n_actions(),
        sigma2_det: pool.models()[0].sigma2_det(),
        encoder: pool.encoder().spec().clone(),
        models: entries,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Read a directory written by [`save_pool`]. Loss traces are not stored.
pub fn load_pool(dir: &Path) -> Result<(TrainedPool, PoolManifest)> {
    let manifest: PoolManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
    let encoder = Arc::new(Encoder::new(
        manifest.encoder.clone(),
        StateUniverse::Alchemy {
            n_features: manifest.n_features,
        },
    )?);
    if encoder.d_latent() != manifest.latent_dim {
        return Err(Error::Checkpoint(format!(
            "manifest latent_dim {} does not match its encoder ({})",
            manifest.latent_dim,
            encoder.d_latent()
        )));
    }
    let mut models = Vec::with_capacity(manifest.models.len());
    let mut tasks = Vec::with_capacity(manifest.models.len());
    for entry in &manifest.models {
        let net = FeedforwardNet::load(&dir.join(&entry.checkpoint))?;
        let model = LatentDeltaModel::from_net(entry.model_id, manifest.latent_dim, manifest.n_actions, net)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.checkpoint)))?
            .with_sigma2(manifest.sigma2_det)?;
        let task: AlchemyTaskSpec = serde_json::from_slice(&std::fs::read(dir.join(&entry.task_file))?)?;
        task.validate()?;
        if task.task_id != entry.task_id || task.n_features != manifest.n_features {
            return Err(Error::Checkpoint(format!("{} does not match the manifest", entry.task_file)));
        }
        models.push(model);
        tasks.push(task);
    }
    let traces = vec![LossTrace::default(); models.len()];
    Ok((
        TrainedPool {
            pool: ModelPool::new(models, encoder)?,
            tasks,
            traces,
        },
        manifest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderKind;
    use crate::envs::alchemy::shortest_paths;
    use crate::envs::AlchemyState;
    use crate::separation::SeparationFunction;

    fn encoder(n_features: usize) -> Arc<Encoder> {
        Arc::new(
            Encoder::new(
                EncoderSpec::new(EncoderKind::RandomProjection, 16, 3),
                StateUniverse::Alchemy { n_features },
            )
            .unwrap(),
        )
    }

    fn tiny() -> MetaTrainConfig {
        MetaTrainConfig {
            n_tasks: 3,
            transitions_per_task: 256,
            validation_per_task: 32,
            epochs: 3,
            batch_size: 64,
            learning_rate: 1e-3,
            patience: 50,
        }
    }

    #[test]
    fn random_transitions_restart_finished_episodes() {
        let task = AlchemyTaskSpec::open(3, vec![0.5, -0.25, 0.25], 0).unwrap();
        let buf = collect_random_transitions(&task, &encoder(3), 300, RngStream::new(1, 0)).unwrap();
        assert_eq!(buf.len(), 300);
        assert!(buf.iter().any(|r| r.terminal));
        for w in buf.records().windows(2) {
            if !w[0].terminal {
                assert_eq!(w[0].next_state.state_id(), w[1].state.state_id());
            }
        }
    }

    #[test]
    fn meta_train_is_deterministic_and_round_trips() {
        let a = meta_train(&tiny(), 3, encoder(3), 5).unwrap();
        let b = meta_train(&tiny(), 3, encoder(3), 5).unwrap();
        assert_eq!(a.pool.len(), 3);
        assert_eq!(a.tasks, b.tasks);
        for (x, y) in a.pool.models().iter().zip(b.pool.models()) {
            assert_eq!(x.net().to_bytes(), y.net().to_bytes());
        }
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_pool(dir.path(), &a).unwrap();
        assert_eq!(manifest.models.len(), 3);
        let (loaded, m2) = load_pool(dir.path()).unwrap();
        assert_eq!(manifest, m2);
        assert_eq!(loaded.tasks, a.tasks);
        for (x, y) in a.pool.models().iter().zip(loaded.pool.models()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn corrupt_manifest_is_rejected() {
        let a = meta_train(&MetaTrainConfig { n_tasks: 2, ..tiny() }, 3, encoder(3), 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_pool(dir.path(), &a).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).unwrap().replace("\"latent_dim\": 16", "\"latent_dim\": 8");
        std::fs::write(&path, text).unwrap();
        assert!(load_pool(dir.path()).is_err());
    }

    #[test]
    fn normalized_and_thresholds() {
        assert_eq!(normalized(0.5, 0.0), 0.0);
        assert_eq!(normalized(0.45, 0.9), 0.5);
        assert_eq!(episodes_to_exceed(&[0.1, 0.3, 0.9], 0.2), Some(2));
        assert_eq!(episodes_to_exceed(&[0.1, 0.3, 0.9], 0.8), Some(3));
        assert_eq!(episodes_to_exceed(&[0.1], 0.8), None);
    }

    fn trial(id: usize, norm: Vec<f64>, correct: bool) -> TrialResult {
        TrialResult {
            trial_id: id,
            method: Method::Hype,
            true_base_task_id: 0,
            selected_model_id: if correct { 0 } else { 1 },
            correct_selection: correct,
            experiment: vec![0, 1],
            degenerate: false,
            returns: norm.clone(),
            steps_per_episode: vec![3; norm.len()],
            episodes_to_exceed_02: episodes_to_exceed(&norm, 0.2),
            episodes_to_exceed_08: episodes_to_exceed(&norm, 0.8),
            normalized_returns: norm,
            reselections: 0,
            selection_steps: 2,
        }
    }

    #[test]
    fn aggregate_single_perfect_trial() {
        let s = aggregate(&[trial(0, vec![1.0; 8], true)]).unwrap();
        assert_eq!(s.selection_accuracy, 1.0);
        assert!(s.per_episode.iter().all(|e| e.mean_normalized_return == 1.0 && e.std_normalized_return == 0.0));
        assert_eq!(s.trials_exceeding_08, 1);
        assert_eq!(s.mean_episodes_to_02, Some(1.0));
    }

    #[test]
    fn aggregate_statistics() {
        let s = aggregate(&[trial(1, vec![0.0, 1.0], false), trial(0, vec![0.5, 0.5], true)]).unwrap();
        assert_eq!(s.n_trials, 2);
        assert_eq!(s.correct_selections, 1);
        assert_eq!(s.per_episode[0].mean_normalized_return, 0.25);
        assert_eq!(s.per_episode[0].std_normalized_return, 0.25);
        assert_eq!(s.trials_exceeding_02, 2);
        assert_eq!(s.trials_exceeding_08, 1);
        assert_eq!(s.mean_episodes_to_02, Some(1.5));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn forced_correct_selection_on_the_training_task() {
        // A tabular-accurate stand-in: train hard on one open task, then adapt
        // with a one-model pool so selection is necessarily correct.
        let enc = encoder(3);
        let task = AlchemyTaskSpec::open(3, vec![0.5, -0.25, 0.25], 0).unwrap();
        let data = collect_random_transitions(&task, &enc, 2000, RngStream::new(2, 0)).unwrap();
        let mut model = LatentDeltaModel::new(0, 16, 4, RngStream::new(2, 1)).unwrap();
        let mut opt = OptimizerState::adam(3e-3).unwrap();
        train_delta_model(&mut model, &data, None, &mut opt, &TrainConfig::new(60, 128), RngStream::new(2, 2)).unwrap();
        let pool = ModelPool::new(vec![model], enc.clone()).unwrap();
        let trained = TrainedPool {
            pool,
            tasks: vec![task.clone()],
            traces: vec![LossTrace::default()],
        };
        let own = evaluate_own_tasks(&trained, &MpcConfig::default(), 20, 3).unwrap();
        assert!(own[0].mean_normalized_return >= 0.85, "{own:?}");
        let best = task.best_state();
        let worst_path = AlchemyState::all(3)
            .filter_map(|s| shortest_paths(&task, &s)[best.index()])
            .max()
            .unwrap();
        assert!(own[0].mean_steps <= (worst_path + 1) as f64);
        let planner = PlannerConfig::new(3, SeparationFunction::Cd);
        let cfg = AdaptConfig {
            n_trials: 1,
            episodes_per_trial: 2,
            ..AdaptConfig::new(Method::Hype)
        };
        let r = run_adaptation_trial(&trained.pool, &task, &cfg, &planner, &MpcConfig::default(), FitMetric::Mse, 0, 4).unwrap();
        assert!(r.correct_selection);
        assert_eq!(r.selection_steps, 3);
        assert_eq!(r.normalized_returns.len(), 2);
        assert!(r.normalized_returns.iter().all(|x| *x <= 1.0 + 1e-9));
    }

    #[test]
    fn methods_spend_equal_selection_budgets() {
        let trained = meta_train(&tiny(), 3, encoder(3), 8).unwrap();
        let planner = PlannerConfig::new(4, SeparationFunction::Cd);
        for method in [Method::Hype, Method::Etc] {
            let cfg = AdaptConfig {
                n_trials: 3,
                episodes_per_trial: 1,
                ..AdaptConfig::new(method)
            };
            let results = run_adaptation(&trained, &cfg, &planner, &MpcConfig::default(), 1).unwrap();
            assert!(results.iter().all(|r| r.selection_steps == 4));
            assert_eq!(results, run_adaptation(&trained, &cfg, &planner, &MpcConfig::default(), 1).unwrap());
        }
    }

    #[test]
    fn config_parsing() {
        assert_eq!("etc".parse::<Method>().unwrap(), Method::Etc);
        assert!("random".parse::<Method>().is_err());
        let m: MetaTrainConfig = serde_json::from_str(&serde_json::to_string(&MetaTrainConfig::paper_scale()).unwrap()).unwrap();
        assert_eq!(m.transitions_per_task, 25_600);
        assert!(MetaTrainConfig { epochs: 0, ..MetaTrainConfig::desk() }.validate().is_err());
        assert!(AdaptConfig { n_trials: 0, ..AdaptConfig::new(Method::Hype) }.validate().is_err());
    }
}
