//! Command-line driver: meta-train a pool, run adaptation trials, sweep the
//! chain identification experiment, and compare methods.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use hype_core::pipeline::{Method, Summary};

use crate::config::{ConfigError, ExperimentConfig};
use crate::report::sig9;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "hype", version, about = "Hypothesis-planned exploration experiments")]
pub struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (JSON). Defaults to the 3-feature desk profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use the full-size meta-training settings.
    #[arg(long)]
    pub paper_scale: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one dynamics model per meta-training task and save the pool.
    MetaTrain(RunArgs),
    /// Run adaptation trials with a saved pool.
    Adapt {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Pool directory; defaults to `<out>/pool`.
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Occupancy, identification error and bounds on the two-chain problem.
    Theory(RunArgs),
    /// Side-by-side reward curves of two trials tables.
    Compare {
        #[arg(long)]
        hype: PathBuf,
        #[arg(long)]
        etc: PathBuf,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: hype_core::Error| e.to_string())
}

pub fn resolve_config(args: &RunArgs) -> std::result::Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk(3),
    };
    if args.paper_scale {
        cfg.meta_train = hype_core::pipeline::MetaTrainConfig::paper_scale();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Exit code for a failed command: configuration problems are 2, anything
/// else 3.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some()
            || matches!(cause.downcast_ref::<hype_core::Error>(), Some(hype_core::Error::Config { .. }))
        {
            return EXIT_CONFIG;
        }
    }
    EXIT_RUNTIME
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.jobs {
        Some(0) => Err(ConfigError::at("--jobs", "must be at least 1").into()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            pool.install(|| dispatch(cli.command))
        }
        None => dispatch(cli.command),
    }
}

fn print_summary(s: &Summary) {
    println!(
        "{}: correct selection {}/{} ({})",
        s.method,
        s.correct_selections,
        s.n_trials,
        sig9(s.selection_accuracy)
    );
    println!(
        "{}: trials exceeding 0.2: {}, exceeding 0.8: {}",
        s.method, s.trials_exceeding_02, s.trials_exceeding_08
    );
    let fmt = |x: Option<f64>| x.map(sig9).unwrap_or_else(|| "-".into());
    println!(
        "{}: mean episodes to exceed 0.2: {}, 0.8: {}",
        s.method,
        fmt(s.mean_episodes_to_02),
        fmt(s.mean_episodes_to_08)
    );
    for e in &s.per_episode {
        println!(
            "{}: episode {} normalized reward {} +- {}",
            s.method,
            e.episode,
            sig9(e.mean_normalized_return),
            sig9(e.std_normalized_return)
        );
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::MetaTrain(args) => {
            let cfg = resolve_config(&args)?;
            let out = commands::cmd_meta_train(&cfg)?;
            for s in &out.own_task {
                println!(
                    "model {}: own-task normalized reward {}, mean steps {}",
                    s.model_id,
                    sig9(s.mean_normalized_return),
                    sig9(s.mean_steps)
                );
            }
            println!("pool: {}", out.pool_dir.display());
            println!("manifest sha256: {}", out.manifest_hash);
        }
        Command::Adapt { run, method, pool } => {
            let cfg = resolve_config(&run)?;
            let method = method.unwrap_or(cfg.adapt.method);
            let pool = pool.unwrap_or_else(|| cfg.out_dir.join("pool"));
            let out = commands::cmd_adapt(&cfg, method, &pool)?;
            print_summary(&out.summary);
        }
        Command::Theory(args) => {
            let cfg = resolve_config(&args)?;
            let report = commands::cmd_theory(&cfg)?;
            let fmt = |x: Option<f64>| x.map(sig9).unwrap_or_else(|| "-".into());
            println!(
                "informative region: {:?} (0-based states), d0 {}, d_bar {}",
                report.region.region,
                fmt(report.region.d0),
                sig9(report.region.d_bar)
            );
            for r in &report.rows {
                println!(
                    "{} T={}: occupancy {}, error {}, IOR {}, bound {}",
                    r.policy,
                    r.horizon,
                    sig9(r.epsilon_or_alpha),
                    sig9(r.error_rate),
                    fmt(r.ior),
                    fmt(r.bound_value)
                );
            }
        }
        Command::Compare { hype, etc, pool, out } => {
            let c = commands::cmd_compare(&hype, &etc, pool.as_deref(), &out)?;
            print_summary(&c.hype);
            print_summary(&c.etc);
            if let Some(n) = c.n_models {
                println!("chance selection rate: {}", sig9(1.0 / n as f64));
            }
            for (i, d) in c.difference.iter().enumerate() {
                println!("episode {}: difference {}", i + 1, sig9(*d));
            }
        }
    }
    Ok(())
}
