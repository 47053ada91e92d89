//! BPTT gradients against central finite differences.

use ltcnet::cell::SolverConfig;
use ltcnet::network::{backward, forward, CellKind, LayerSpec, ModelParams, Mode, NetworkSpec};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms; central
/// differences cannot resolve them relative to a loss of order one.
const MAGNITUDE_FLOOR: f64 = 1e-6;
const DROPOUT_SEED: u64 = 77;

/// Mean clipped cross-entropy, written independently of the library.
fn oracle_loss(model: &ModelParams<f64>, batch: &Array3<f64>, onehot: &Array2<f64>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(DROPOUT_SEED);
    let (probs, _) = forward(model, batch.view(), Mode::Train, &mut rng).unwrap();
    let mut total = 0.0;
    for (p, y) in probs.rows().into_iter().zip(onehot.rows()) {
        let p_true: f64 = p.iter().zip(y.iter()).map(|(p, y)| p * y).sum();
        total -= p_true.clamp(1e-7, 1.0 - 1e-7).ln();
    }
    total / probs.nrows() as f64
}

fn max_relative_error(spec: NetworkSpec, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelParams::<f64>::init(spec, &mut rng).unwrap();
    // Non-zero biases so their gradients are exercised away from symmetric points.
    for t in model.tensors_mut() {
        let mut t = t;
        t.mapv_inplace(|v| if v == 0.0 { rng.random_range(-0.3..0.3) } else { v });
    }
    let (b, steps, m) = (2, 3, model.spec.input_features);
    let batch = Array3::from_shape_simple_fn((b, steps, m), || rng.random_range(-1.5..1.5));
    let mut onehot = Array2::zeros((b, 2));
    onehot[[0, 0]] = 1.0;
    onehot[[1, 1]] = 1.0;

    let mut drop_rng = ChaCha8Rng::seed_from_u64(DROPOUT_SEED);
    let (_, trace) = forward(&model, batch.view(), Mode::Train, &mut drop_rng).unwrap();
    let grads = backward(&model, &trace, onehot.view()).unwrap();

    let mut worst = 0.0_f64;
    let mut checked = 0;
    for (ti, analytic) in grads.tensors.iter().enumerate() {
        for (ei, &a) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            *plus.tensors_mut()[ti].iter_mut().nth(ei).unwrap() += H;
            let mut minus = model.clone();
            *minus.tensors_mut()[ti].iter_mut().nth(ei).unwrap() -= H;
            let numeric =
                (oracle_loss(&plus, &batch, &onehot) - oracle_loss(&minus, &batch, &onehot)) / (2.0 * H);
            let scale = a.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
            let err = (a - numeric).abs() / scale;
            assert!(
                err <= TOLERANCE,
                "{} [{}]: analytic {a:e}, numeric {numeric:e}, rel {err:e}",
                grads.names[ti],
                ei
            );
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

fn small_spec(cell: CellKind, dropout: f64) -> NetworkSpec {
    NetworkSpec::stacked(
        cell,
        2,
        4,
        dropout,
        3,
        2,
        SolverConfig {
            step_size: 1.0,
            unfold_steps: 2,
        },
    )
}

#[test]
fn ltc_two_layers_with_dropout() {
    let (worst, n) = max_relative_error(small_spec(CellKind::Ltc, 0.25), 1);
    assert_eq!(n, 94);
    assert!(worst <= TOLERANCE);
}

#[test]
fn lstm_two_layers_with_dropout() {
    let (worst, _) = max_relative_error(small_spec(CellKind::Lstm, 0.25), 2);
    assert!(worst <= TOLERANCE);
}

#[test]
fn single_final_state_layer_both_cells() {
    for (cell, seed) in [(CellKind::Ltc, 3), (CellKind::Lstm, 4)] {
        let spec = NetworkSpec::stacked(cell, 1, 4, 0.0, 3, 2, SolverConfig { step_size: 0.7, unfold_steps: 2 });
        let (worst, _) = max_relative_error(spec, seed);
        assert!(worst <= TOLERANCE);
    }
}

#[test]
fn mixed_cell_stack() {
    let mut spec = small_spec(CellKind::Ltc, 0.1);
    spec.layers[1] = LayerSpec {
        cell_kind: CellKind::Lstm,
        ..spec.layers[1]
    };
    let (worst, _) = max_relative_error(spec, 5);
    assert!(worst <= TOLERANCE);
}

#[test]
fn duplicated_sample_doubles_its_contribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let spec = small_spec(CellKind::Ltc, 0.0);
    let model = ModelParams::<f64>::init(spec, &mut rng).unwrap();
    let a = Array3::from_shape_simple_fn((1, 3, 3), || rng.random_range(-1.0..1.0));
    let b = Array3::from_shape_simple_fn((1, 3, 3), || rng.random_range(-1.0..1.0));
    let grad_of = |batch: Array3<f64>, labels: Array2<f64>| {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (_, trace) = forward(&model, batch.view(), Mode::Train, &mut r).unwrap();
        backward(&model, &trace, labels.view()).unwrap()
    };
    let ga = grad_of(a.clone(), ndarray::array![[1.0, 0.0]]);
    let gb = grad_of(b.clone(), ndarray::array![[0.0, 1.0]]);
    let triple = ndarray::concatenate![ndarray::Axis(0), a, a, b];
    let g3 = grad_of(triple, ndarray::array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
    for ((ta, tb), t3) in ga.tensors.iter().zip(&gb.tensors).zip(&g3.tensors) {
        for ((&x, &y), &z) in ta.iter().zip(tb.iter()).zip(t3.iter()) {
            let expected = (2.0 * x + y) / 3.0;
            assert!((z - expected).abs() <= 1e-12 * (1.0 + expected.abs()), "{z} vs {expected}");
        }
    }
}
