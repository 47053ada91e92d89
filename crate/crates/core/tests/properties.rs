//! Cross-module properties checked against independent oracles.

use ltcnet::data::{
    class_mean, prepare, split_dataset, synth_generate, zscore_apply, zscore_fit, PipelineConfig, SplitFractions,
    SynthConfig,
};
use ltcnet::ensemble::{
    coefficients_report, predict_logistic_regression, train_logistic_regression, LogisticRegressionConfig,
};
use ltcnet::metrics::{accuracy, confusion_matrix, roc_auc};
use ltcnet::network::softmax;
use ltcnet::stats::{f_survival, student_t_cdf, student_t_two_sided_p};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Simpson integration of the Student t density from 0 to `t`, using a
/// normalizing constant computed from exact gamma values.
fn t_cdf_oracle(t: f64, dof: u32) -> f64 {
    // Gamma((d+1)/2) / Gamma(d/2) for integer d by recurrence from
    // Gamma(1/2) = sqrt(pi), Gamma(1) = 1.
    let gamma_half_steps = |twice: u32| -> f64 {
        let (mut value, mut z) = if twice % 2 == 1 {
            (std::f64::consts::PI.sqrt(), 0.5)
        } else {
            (1.0, 1.0)
        };
        while z < twice as f64 / 2.0 - 1e-9 {
            value *= z;
            z += 1.0;
        }
        value
    };
    let d = dof as f64;
    let norm = gamma_half_steps(dof + 1) / (gamma_half_steps(dof) * (d * std::f64::consts::PI).sqrt());
    let density = |x: f64| norm * (1.0 + x * x / d).powf(-(d + 1.0) / 2.0);
    let n = 20_000;
    let h = t / n as f64;
    let mut s = density(0.0) + density(t);
    for i in 1..n {
        s += density(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + s * h / 3.0
}

#[test]
fn t_cdf_matches_numerical_integration() {
    for dof in [1, 4, 30] {
        for t in [-3.0, -1.0, 0.0, 1.0, 3.0] {
            let lib = student_t_cdf(t, dof as f64).unwrap();
            let oracle = t_cdf_oracle(t, dof);
            assert!((lib - oracle).abs() < 1e-6, "dof {dof}, t {t}: {lib} vs {oracle}");
        }
    }
    assert_eq!(student_t_two_sided_p(0.0, 7.0).unwrap(), 1.0);
}

#[test]
fn f_with_one_numerator_dof_is_squared_t() {
    for d in [2.0, 5.0, 17.0, 60.0] {
        for t in [0.3, 1.0, 2.2, 4.5] {
            let from_f = f_survival(t * t, 1.0, d).unwrap();
            let from_t = student_t_two_sided_p(t, d).unwrap();
            assert!((from_f - from_t).abs() < 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn p_values_are_probabilities(t in -50.0f64..50.0, dof in 0.5f64..200.0) {
        let p = student_t_two_sided_p(t, dof).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn softmax_rows_sum_to_one(logits in prop::collection::vec(-700.0f64..700.0, 1..12)) {
        let p = softmax(Array1::from(logits).view());
        prop_assert!((p.sum() - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn auc_is_rank_based(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..60);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(-1.0..1.0_f64) * 8.0).round()).collect();
        let mut positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        positive[0] = true;
        positive[1] = false;
        let auc = roc_auc(&scores, &positive).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
        prop_assert!((roc_auc(&transformed, &positive).unwrap() - auc).abs() < 1e-12);
        let flipped: Vec<bool> = positive.iter().map(|p| !p).collect();
        prop_assert!((roc_auc(&scores, &flipped).unwrap() - (1.0 - auc)).abs() < 1e-12);
    }

    #[test]
    fn accuracy_matches_direct_count(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..80);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let direct = truth.iter().zip(&pred).filter(|(a, b)| a == b).count() as f64 / n as f64;
        prop_assert_eq!(accuracy(&confusion_matrix(&truth, &pred, 3).unwrap()), direct);
    }

    #[test]
    fn splits_partition_the_rows(n in 5usize..400, seed in 0u64..50) {
        let split = split_dataset(n, SplitFractions::default(), seed).unwrap();
        let mut all: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn zscore_on_fitting_rows_is_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Array2::from_shape_simple_fn((137, 5), || rng.random_range(-40.0..90.0));
    let stats = zscore_fit(x.view()).unwrap();
    let z = zscore_apply(x.view(), &stats).unwrap();
    for col in z.columns() {
        let mean = col.sum() / col.len() as f64;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
        assert!(mean.abs() <= 1e-9);
        assert!((std - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn synthetic_class_means_are_the_requested_distance_apart() {
    let raw = synth_generate(&SynthConfig {
        missing_fraction: 0.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let positive: Vec<bool> = raw.labels.as_ref().unwrap().iter().map(|l| l == "NF1").collect();
    let negative: Vec<bool> = positive.iter().map(|p| !p).collect();
    let diff = class_mean(raw.values.view(), &positive) - class_mean(raw.values.view(), &negative);
    let distance = diff.dot(&diff).sqrt();
    assert!((distance - 2.0).abs() <= 0.2, "distance {distance}");
}

#[test]
fn pipeline_is_repeatable() {
    let raw = synth_generate(&SynthConfig {
        num_samples: 250,
        num_features: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let config = PipelineConfig {
        timesteps: 4,
        ..PipelineConfig::default()
    };
    let a = prepare(&raw, &config).unwrap();
    let b = prepare(&raw, &config).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
    assert_eq!(a.train.features.dim(), (160, 4, 2));
    assert!(a.train.features.iter().all(|v| v.is_finite()));
}

#[test]
fn only_informative_feature_ranks_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 400;
    let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = Array2::from_shape_fn((n, 5), |(i, j)| {
        let noise: f64 = rng.random_range(-1.0..1.0);
        if j == 0 {
            noise + if y[i] == 1 { 1.5 } else { -1.5 }
        } else {
            noise
        }
    });
    let params = train_logistic_regression(x.view(), &y, &LogisticRegressionConfig::default()).unwrap();
    let names: Vec<String> = (0..5).map(|i| format!("feature{i}")).collect();
    let report = coefficients_report(&params, &names).unwrap();
    assert_eq!(report[0].0, "feature0");
    let mut sorted: Vec<String> = report.iter().map(|(n, _)| n.clone()).collect();
    sorted.sort();
    assert_eq!(sorted, names);
    let probs = predict_logistic_regression(&params, x.view()).unwrap();
    let correct = probs
        .rows()
        .into_iter()
        .zip(&y)
        .filter(|(p, &t)| usize::from(p[1] > p[0]) == t)
        .count();
    assert!(correct as f64 / n as f64 > 0.9);
}
