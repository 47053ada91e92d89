//! Training-loop contracts on a small synthetic problem.

use ltcnet::cell::SolverConfig;
use ltcnet::data::{prepare, synth_generate, PipelineConfig, PreparedData, SynthConfig};
use ltcnet::network::{CellKind, ModelParams, NetworkSpec};
use ltcnet::rng::{self, Stream};
use ltcnet::training::{evaluate_loss, train, TrainConfig};
use ltcnet::Error;

fn small_problem() -> PreparedData {
    problem_with_timesteps(2)
}

fn problem_with_timesteps(timesteps: usize) -> PreparedData {
    let raw = synth_generate(&SynthConfig {
        num_samples: 300,
        num_features: 6,
        class_separation: 3.0,
        ..SynthConfig::default()
    })
    .unwrap();
    prepare(
        &raw,
        &PipelineConfig {
            timesteps,
            ..PipelineConfig::default()
        },
    )
    .unwrap()
}

fn small_model<S: ltcnet::Scalar>(cell: CellKind, features: usize) -> ModelParams<S> {
    let solver = SolverConfig {
        step_size: 1.0,
        unfold_steps: 2,
    };
    let spec = NetworkSpec::stacked(cell, 2, 5, 0.2, features, 2, solver);
    ModelParams::init(spec, &mut rng::stream(3, Stream::Init)).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 64,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = small_problem();
    let model = small_model::<f64>(CellKind::Ltc, data.train.feature_dim());
    let (a, report_a) = train(&model, &data.train, &data.val, &config(4)).unwrap();
    let (b, report_b) = train(&model, &data.train, &data.val, &config(4)).unwrap();
    assert_eq!(report_a, report_b);
    assert_eq!(a, b);
    let (_, other) = train(&model, &data.train, &data.val, &TrainConfig { seed: 7, ..config(4) }).unwrap();
    assert_ne!(report_a, other);
}

#[test]
fn one_epoch_takes_one_step_per_batch() {
    let data = small_problem();
    let model = small_model::<f64>(CellKind::Ltc, data.train.feature_dim());
    let (_, report) = train(&model, &data.train, &data.val, &config(1)).unwrap();
    assert_eq!(report.stopped_epoch, 1);
    assert_eq!(report.optimizer_steps, data.train.len().div_ceil(64) as u64);
    assert_eq!(data.train.len(), 192);
}

#[test]
fn returned_weights_are_the_best_epoch() {
    let data = small_problem();
    for cell in [CellKind::Ltc, CellKind::Lstm] {
        let model = small_model::<f64>(cell, data.train.feature_dim());
        let (best, report) = train(&model, &data.train, &data.val, &config(12)).unwrap();
        let min = report.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(report.best().val_loss, min);
        let (reevaluated, _) = evaluate_loss(&best, &data.val).unwrap();
        assert_eq!(reevaluated, min);
        assert!(report.stopped_epoch <= 12);
    }
}

#[test]
fn learning_rate_never_rises_or_drops_below_floor() {
    let data = small_problem();
    let model = small_model::<f64>(CellKind::Ltc, data.train.feature_dim());
    let cfg = TrainConfig {
        scheduler_patience: 1,
        early_stop_patience: 30,
        min_learning_rate: 2e-3,
        ..config(15)
    };
    let (_, report) = train(&model, &data.train, &data.val, &cfg).unwrap();
    for pair in report.epochs.windows(2) {
        assert!(pair[1].learning_rate <= pair[0].learning_rate);
    }
    assert!(report.epochs.iter().all(|e| e.learning_rate >= cfg.min_learning_rate));
}

#[test]
fn training_reduces_validation_loss() {
    let data = problem_with_timesteps(1);
    let model = small_model::<f64>(CellKind::Ltc, data.train.feature_dim());
    let (initial, _) = evaluate_loss(&model, &data.val).unwrap();
    let (best, _) = train(&model, &data.train, &data.val, &config(30)).unwrap();
    let (trained, accuracy) = evaluate_loss(&best, &data.val).unwrap();
    assert!(trained < initial, "{trained} !< {initial}");
    assert!(accuracy > 0.8, "validation accuracy {accuracy}");
}

#[test]
fn single_precision_training_runs() {
    let data = small_problem();
    let train_set = data.train.cast::<f32>();
    let val_set = data.val.cast::<f32>();
    let model = small_model::<f32>(CellKind::Ltc, train_set.feature_dim());
    let (_, report) = train(&model, &train_set, &val_set, &config(3)).unwrap();
    assert!(report.epochs.iter().all(|e| e.val_loss.is_finite()));
}

#[test]
fn empty_or_mismatched_splits_are_rejected() {
    let data = small_problem();
    let model = small_model::<f64>(CellKind::Ltc, data.train.feature_dim());
    let empty = data.val.subset(&[]);
    assert!(matches!(
        train(&model, &data.train, &empty, &config(1)),
        Err(Error::Config(_))
    ));
    let wrong = small_model::<f64>(CellKind::Ltc, data.train.feature_dim() + 1);
    assert!(matches!(
        train(&wrong, &data.train, &data.val, &config(1)),
        Err(Error::Shape { .. })
    ));
}
