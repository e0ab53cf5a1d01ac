use std::sync::Arc;

use hype_core::dynamics::HypothesisModel;
use hype_core::encoder::{Encoder, EncoderKind, EncoderSpec, StateUniverse};
use hype_core::pipeline::{aggregate, load_pool, meta_train, run_adaptation, save_pool, AdaptConfig, MetaTrainConfig, Method};
use hype_core::planning::{MpcConfig, PlannerConfig};
use hype_core::separation::SeparationFunction;

fn small() -> MetaTrainConfig {
    MetaTrainConfig {
        n_tasks: 4,
        transitions_per_task: 800,
        validation_per_task: 64,
        epochs: 20,
        batch_size: 128,
        learning_rate: 1e-3,
        patience: 50,
    }
}

fn encoder() -> Arc<Encoder> {
    Arc::new(
        Encoder::new(
            EncoderSpec::new(EncoderKind::RandomProjection, 32, 1),
            StateUniverse::Alchemy { n_features: 3 },
        )
        .unwrap(),
    )
}

#[test]
fn both_methods_run_on_a_reloaded_pool() {
    let trained = meta_train(&small(), 3, encoder(), 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_pool(dir.path(), &trained).unwrap();
    let (reloaded, manifest) = load_pool(dir.path()).unwrap();
    assert_eq!(manifest.models.len(), 4);
    let z = reloaded.pool.encoder().codebook()[3].clone();
    for (a, b) in trained.pool.models().iter().zip(reloaded.pool.models()) {
        for act in 0..4 {
            let act = hype_core::primitives::DiscreteAction(act);
            assert_eq!(a.predict_point(&z, act).unwrap(), b.predict_point(&z, act).unwrap());
        }
    }

    let planner = PlannerConfig::new(3, SeparationFunction::Cd);
    let mpc = MpcConfig::default();
    for method in [Method::Hype, Method::Etc] {
        let cfg = AdaptConfig {
            n_trials: 6,
            episodes_per_trial: 3,
            ..AdaptConfig::new(method)
        };
        let a = run_adaptation(&trained, &cfg, &planner, &mpc, 5).unwrap();
        let b = run_adaptation(&reloaded, &cfg, &planner, &mpc, 5).unwrap();
        assert_eq!(a, b);
        let s = aggregate(&a).unwrap();
        assert_eq!(s.n_trials, 6);
        assert_eq!(s.per_episode.len(), 3);
        for r in &a {
            assert_eq!(r.selection_steps, 3);
            assert!(r.normalized_returns.iter().all(|x| *x <= 1.0 + 1e-9));
            assert_eq!(r.correct_selection, r.selected_model_id == r.true_base_task_id);
            assert_eq!(r.experiment.len(), 3);
        }
    }
}
