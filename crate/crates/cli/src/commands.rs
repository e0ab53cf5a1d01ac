//! The four subcommands. Each returns its results so callers other than the
//! binary can inspect them; printing happens in [`crate::run`].

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use hype_core::encoder::Encoder;
use hype_core::pipeline::{
    aggregate, evaluate_own_tasks, load_pool, meta_train, run_adaptation, save_pool, Method, OwnTaskScore,
    PoolManifest, Summary, TrainedPool, TrialResult, MANIFEST_FILE,
};
use hype_core::theory::{chain_sweep, ChainPolicy, TheoryReport};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, ExperimentConfig};
use crate::report::{self, Chart, Series, PALETTE};

#[derive(Debug, Clone)]
pub struct MetaTrainOutput {
    pub pool_dir: PathBuf,
    pub manifest_hash: String,
    pub own_task: Vec<OwnTaskScore>,
}

/// sha256 over the manifest and every file it lists, in manifest order.
pub fn manifest_hash(pool_dir: &Path) -> Result<String> {
    let manifest_bytes = std::fs::read(pool_dir.join(MANIFEST_FILE))?;
    let manifest: PoolManifest = serde_json::from_slice(&manifest_bytes)?;
    let mut hasher = Sha256::new();
    hasher.update(&manifest_bytes);
    for entry in &manifest.models {
        hasher.update(std::fs::read(pool_dir.join(&entry.checkpoint))?);
        hasher.update(std::fs::read(pool_dir.join(&entry.task_file))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn cmd_meta_train(cfg: &ExperimentConfig) -> Result<MetaTrainOutput> {
    let encoder = Arc::new(Encoder::new(cfg.encoder.clone(), cfg.universe()).map_err(ConfigError::from)?);
    let trained = meta_train(&cfg.meta_train, cfg.env.n_features, encoder, cfg.seed).context("meta-training failed")?;
    let out = &cfg.out_dir;
    let pool_dir = out.join("pool");
    save_pool(&pool_dir, &trained)?;
    report::write_file(&out.join("config.json"), &cfg.to_json())?;
    let traces: Vec<(usize, &hype_core::dynamics::LossTrace)> =
        trained.tasks.iter().map(|t| t.task_id).zip(trained.traces.iter()).collect();
    report::write_file(&out.join("training_loss.csv"), &report::loss_csv(&traces)?)?;
    let own_task = evaluate_own_tasks(&trained, &cfg.mpc, cfg.own_task_episodes, cfg.seed)?;
    let rows = own_task
        .iter()
        .map(|s| {
            vec![
                s.model_id.to_string(),
                report::sig9(s.mean_normalized_return),
                report::sig9(s.mean_steps),
            ]
        })
        .collect();
    report::write_file(
        &out.join("own_task.csv"),
        &report::generic_csv(&["model_id", "mean_normalized_return", "mean_steps"], rows)?,
    )?;
    Ok(MetaTrainOutput {
        manifest_hash: manifest_hash(&pool_dir)?,
        pool_dir,
        own_task,
    })
}

/// Loads a pool and checks it was built for this configuration.
pub fn load_matching_pool(cfg: &ExperimentConfig, pool_dir: &Path) -> Result<TrainedPool> {
    let (trained, manifest) = load_pool(pool_dir)
        .map_err(|e| ConfigError(format!("cannot load pool from {}: {e}", pool_dir.display())))?;
    let mismatch = |what: &str, pool: String, config: String| {
        ConfigError(format!("pool {} has {what} {pool} but the config has {config}", pool_dir.display()))
    };
    if manifest.n_features != cfg.env.n_features {
        return Err(mismatch("n_features", manifest.n_features.to_string(), cfg.env.n_features.to_string()).into());
    }
    if manifest.n_actions != cfg.env.n_features + 1 {
        return Err(mismatch("n_actions", manifest.n_actions.to_string(), (cfg.env.n_features + 1).to_string()).into());
    }
    if manifest.latent_dim != cfg.encoder.d_latent {
        return Err(mismatch("latent dimension", manifest.latent_dim.to_string(), cfg.encoder.d_latent.to_string()).into());
    }
    if manifest.encoder != cfg.encoder {
        return Err(mismatch("encoder", format!("{:?}", manifest.encoder), format!("{:?}", cfg.encoder)).into());
    }
    Ok(trained)
}

#[derive(Debug, Clone)]
pub struct AdaptOutput {
    pub results: Vec<TrialResult>,
    pub summary: Summary,
}

pub fn cmd_adapt(cfg: &ExperimentConfig, method: Method, pool_dir: &Path) -> Result<AdaptOutput> {
    let trained = load_matching_pool(cfg, pool_dir)?;
    let adapt = hype_core::pipeline::AdaptConfig {
        method,
        ..cfg.adapt.clone()
    };
    let results = run_adaptation(&trained, &adapt, &cfg.planner, &cfg.mpc, cfg.seed).context("adaptation failed")?;
    if let Some(r) = results.iter().find(|r| r.selection_steps != cfg.planner.k) {
        bail!(
            "trial {} spent {} selection steps, expected the budget of {}",
            r.trial_id,
            r.selection_steps,
            cfg.planner.k
        );
    }
    let summary = aggregate(&results)?;
    let out = &cfg.out_dir;
    report::write_file(&out.join("trials.csv"), &report::trials_csv(&results)?)?;
    report::write_file(&out.join("summary.csv"), &report::summary_csv(&summary)?)?;
    report::write_file(&out.join("summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    let chart = Chart {
        title: "Adaptation reward",
        x_label: "episode",
        y_label: "normalized reward",
        log_y: false,
        series: vec![curve(&summary, method.name().to_string(), PALETTE[0])],
    };
    report::write_file(&out.join("reward_curves.svg"), &chart.to_svg())?;
    Ok(AdaptOutput { results, summary })
}

fn curve(summary: &Summary, name: String, color: &'static str) -> Series {
    Series {
        name,
        color,
        points: summary
            .per_episode
            .iter()
            .map(|e| (e.episode as f64, e.mean_normalized_return))
            .collect(),
        spread: Some(summary.per_episode.iter().map(|e| e.std_normalized_return).collect()),
    }
}

pub fn cmd_theory(cfg: &ExperimentConfig) -> Result<TheoryReport> {
    let report = chain_sweep(&cfg.theory, cfg.seed)?;
    let out = &cfg.out_dir;
    report::write_file(&out.join("theory.csv"), &report::theory_csv(&report.rows)?)?;
    let series = [ChainPolicy::Uniform, ChainPolicy::HypeChain]
        .into_iter()
        .zip(PALETTE)
        .map(|(p, color)| Series {
            name: p.name().to_string(),
            color,
            points: report
                .rows
                .iter()
                .filter(|r| r.policy == p)
                .map(|r| (r.horizon as f64, r.error_rate))
                .collect(),
            spread: None,
        })
        .collect();
    let chart = Chart {
        title: "Identification error on the chain",
        x_label: "T",
        y_label: "error rate (log scale)",
        log_y: true,
        series,
    };
    report::write_file(&out.join("error_vs_T.svg"), &chart.to_svg())?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct CompareOutput {
    pub hype: Summary,
    pub etc: Summary,
    /// Per episode: hype mean minus etc mean.
    pub difference: Vec<f64>,
    pub n_models: Option<usize>,
}

fn read_trials(path: &Path) -> Result<Vec<TrialResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    Ok(report::parse_trials_csv(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?)
}

pub fn cmd_compare(hype_csv: &Path, etc_csv: &Path, pool_dir: Option<&Path>, out: &Path) -> Result<CompareOutput> {
    let hype = aggregate(&read_trials(hype_csv)?)?;
    let etc = aggregate(&read_trials(etc_csv)?)?;
    if hype.per_episode.len() != etc.per_episode.len() {
        return Err(ConfigError(format!(
            "episode counts differ: {} in {}, {} in {}",
            hype.per_episode.len(),
            hype_csv.display(),
            etc.per_episode.len(),
            etc_csv.display()
        ))
        .into());
    }
    let n_models = match pool_dir {
        Some(dir) => {
            let bytes = std::fs::read(dir.join(MANIFEST_FILE))
                .map_err(|e| ConfigError(format!("cannot read pool manifest in {}: {e}", dir.display())))?;
            let manifest: PoolManifest =
                serde_json::from_slice(&bytes).map_err(|e| ConfigError(format!("bad pool manifest: {e}")))?;
            Some(manifest.models.len())
        }
        None => None,
    };
    let difference: Vec<f64> = hype
        .per_episode
        .iter()
        .zip(&etc.per_episode)
        .map(|(h, e)| h.mean_normalized_return - e.mean_normalized_return)
        .collect();
    let rows = hype
        .per_episode
        .iter()
        .zip(&etc.per_episode)
        .zip(&difference)
        .map(|((h, e), d)| {
            vec![
                h.episode.to_string(),
                report::sig9(h.mean_normalized_return),
                report::sig9(h.std_normalized_return),
                report::sig9(e.mean_normalized_return),
                report::sig9(e.std_normalized_return),
                report::sig9(*d),
            ]
        })
        .collect();
    report::write_file(
        &out.join("comparison.csv"),
        &report::generic_csv(&["episode", "hype_mean", "hype_std", "etc_mean", "etc_std", "difference"], rows)?,
    )?;
    let chart = Chart {
        title: "Adaptation reward",
        x_label: "episode",
        y_label: "normalized reward",
        log_y: false,
        series: vec![
            curve(&hype, format!("{} (hype file)", hype.method), PALETTE[0]),
            curve(&etc, format!("{} (etc file)", etc.method), PALETTE[1]),
        ],
    };
    report::write_file(&out.join("reward_curves_compare.svg"), &chart.to_svg())?;
    Ok(CompareOutput {
        hype,
        etc,
        difference,
        n_models,
    })
}
