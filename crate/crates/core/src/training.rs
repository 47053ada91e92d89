//! Minibatch training: clipped categorical cross-entropy, Adam,
//! reduce-on-plateau learning rate, and early stopping that restores the
//! best weights.

use ndarray::{ArrayD, ArrayView2, ArrayViewMutD, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{argmax, SequenceDataset};
use crate::error::{Error, Result};
use crate::network::{backward, forward, predict_proba, ModelParams, Mode, PROB_CLIP};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;

/// Minimum decrease that counts as an improvement of the monitored loss.
pub const IMPROVEMENT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub early_stop_patience: usize,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub min_learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            early_stop_patience: 10,
            scheduler_factor: 0.5,
            scheduler_patience: 5,
            min_learning_rate: 1e-5,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if self.early_stop_patience == 0 || self.scheduler_patience == 0 {
            return Err(Error::Config("patience values must be at least 1".into()));
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor < 1.0) {
            return Err(Error::Config(format!(
                "scheduler_factor must be in (0, 1), got {}",
                self.scheduler_factor
            )));
        }
        if !(self.min_learning_rate > 0.0 && self.learning_rate > self.min_learning_rate) {
            return Err(Error::Config(format!(
                "need learning_rate > min_learning_rate > 0, got {} and {}",
                self.learning_rate, self.min_learning_rate
            )));
        }
        Ok(())
    }
}

/// Mean over rows of `-ln(clip(p_true, 1e-7, 1 - 1e-7))`.
pub fn categorical_cross_entropy<S: Scalar>(probs: ArrayView2<S>, onehot: ArrayView2<S>) -> Result<S> {
    if probs.dim() != onehot.dim() {
        return Err(Error::shape(
            "cross-entropy inputs",
            format!("{:?}", probs.dim()),
            format!("{:?}", onehot.dim()),
        ));
    }
    if probs.nrows() == 0 {
        return Err(Error::shape("cross-entropy batch", "at least 1 row", 0));
    }
    let lo = S::lit(PROB_CLIP);
    let hi = S::one() - lo;
    let tol = S::lit(1e-6);
    let mut total = S::zero();
    for (i, (p, y)) in probs.rows().into_iter().zip(onehot.rows()).enumerate() {
        if (p.sum() - S::one()).abs() > tol {
            return Err(Error::Data(format!("probability row {i} does not sum to 1")));
        }
        let hot = y.iter().filter(|&&v| v == S::one()).count();
        let cold = y.iter().filter(|&&v| v == S::zero()).count();
        if hot != 1 || hot + cold != y.len() {
            return Err(Error::Data(format!("label row {i} is not one-hot")));
        }
        let p_true = p.iter().zip(y.iter()).fold(S::zero(), |acc, (&p, &y)| acc + p * y);
        total -= p_true.max(lo).min(hi).ln();
    }
    Ok(total / S::lit(probs.nrows() as f64))
}

/// Adam optimizer state; moments are aligned with [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub first_moment: Vec<ArrayD<S>>,
    pub second_moment: Vec<ArrayD<S>>,
    pub timestep: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn for_model(model: &ModelParams<S>) -> Self {
        let shapes: Vec<Vec<usize>> = model.tensors().iter().map(|t| t.shape().to_vec()).collect();
        Self::for_shapes(&shapes)
    }

    pub fn for_shapes(shapes: &[Vec<usize>]) -> Self {
        let zeros = || shapes.iter().map(|s| ArrayD::zeros(s.as_slice())).collect();
        Self {
            first_moment: zeros(),
            second_moment: zeros(),
            timestep: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One bias-corrected Adam step over `params`, which must be aligned with
    /// `grads` and with the moments. Nothing is modified on error.
    pub fn step(
        &mut self,
        mut params: Vec<ArrayViewMutD<'_, S>>,
        grads: &[ArrayD<S>],
        names: &[String],
        learning_rate: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || grads.len() != self.first_moment.len() {
            return Err(Error::shape("optimizer tensors", self.first_moment.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || g.shape() != self.first_moment[i].shape() {
                return Err(Error::shape(
                    format!("gradient `{}`", name_at(names, i)),
                    format!("{:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in `{}`",
                    name_at(names, i)
                )));
            }
        }
        self.timestep += 1;
        let t = self.timestep as i32;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let one = S::one();
        let correction1 = one - b1.powi(t);
        let correction2 = one - b2.powi(t);
        let lr = S::lit(learning_rate);
        let eps = S::lit(self.epsilon);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / correction1;
                    let v_hat = *v / correction2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

fn name_at(names: &[String], i: usize) -> String {
    names.get(i).cloned().unwrap_or_else(|| format!("tensor {i}"))
}

/// Applies one Adam update to a model and keeps its constraints.
pub fn adam_update<S: Scalar>(
    state: &mut AdamState<S>,
    model: &mut ModelParams<S>,
    grads: &crate::network::Gradients<S>,
    learning_rate: f64,
) -> Result<()> {
    let names = model.tensor_names();
    state.step(model.tensors_mut(), &grads.tensors, &names, learning_rate)?;
    model.project_constraints();
    Ok(())
}

/// Stateful reduce-on-plateau schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub min_learning_rate: f64,
    best: f64,
    wait: usize,
}

impl ReduceOnPlateau {
    pub fn new(factor: f64, patience: usize, min_learning_rate: f64) -> Self {
        Self {
            factor,
            patience,
            min_learning_rate,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Records one epoch's validation loss and returns the learning rate for
    /// the next epoch.
    pub fn observe(&mut self, val_loss: f64, learning_rate: f64) -> f64 {
        if val_loss < self.best - IMPROVEMENT_EPSILON {
            self.best = val_loss;
            self.wait = 0;
            return learning_rate;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            return (learning_rate * self.factor).max(self.min_learning_rate);
        }
        learning_rate
    }
}

/// Learning rate after the last epoch of `history`, given the rate in use
/// during that epoch. Replays the schedule over the whole history.
pub fn reduce_on_plateau(
    history: &[f64],
    learning_rate: f64,
    factor: f64,
    patience: usize,
    min_learning_rate: f64,
) -> f64 {
    let mut schedule = ReduceOnPlateau::new(factor, patience, min_learning_rate);
    let mut reduced = false;
    for &loss in history {
        reduced = schedule.observe(loss, 1.0) < 1.0;
    }
    if reduced {
        (learning_rate * factor).max(min_learning_rate)
    } else {
        learning_rate
    }
}

/// Index of the best (lowest) loss; later equal values do not replace it.
pub fn best_index(history: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &loss) in history.iter().enumerate() {
        match best {
            Some((_, b)) if !(loss < b - IMPROVEMENT_EPSILON) => {}
            _ => best = Some((i, loss)),
        }
    }
    best.map(|(i, _)| i)
}

/// True when the best loss is more than `patience` epochs older than the
/// latest entry. Epochs are counted from 0.
pub fn should_early_stop(history: &[f64], patience: usize) -> bool {
    match best_index(history) {
        Some(best) => history.len() - 1 - best > patience,
        None => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were restored.
    pub best_epoch: usize,
    /// 1-based last epoch that ran.
    pub stopped_epoch: usize,
    pub early_stopped: bool,
    pub optimizer_steps: u64,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

/// Loss and accuracy of a model on a dataset in eval mode.
pub fn evaluate_loss<S: Scalar>(model: &ModelParams<S>, data: &SequenceDataset<S>) -> Result<(f64, f64)> {
    let probs = predict_proba(model, data.features.view())?;
    let loss = categorical_cross_entropy(probs.view(), data.labels_onehot.view())?;
    Ok((loss.to_f64_lossy(), accuracy_of(probs.view(), data.labels_onehot.view())))
}

fn accuracy_of<S: Scalar>(probs: ArrayView2<S>, onehot: ArrayView2<S>) -> f64 {
    let correct = probs
        .rows()
        .into_iter()
        .zip(onehot.rows())
        .filter(|(p, y)| argmax(p.iter().copied()) == argmax(y.iter().copied()))
        .count();
    correct as f64 / probs.nrows() as f64
}

/// Trains `model` in place of a copy and returns the best-epoch weights with
/// the epoch report.
pub fn train<S: Scalar>(
    model: &ModelParams<S>,
    train_set: &SequenceDataset<S>,
    val_set: &SequenceDataset<S>,
    config: &TrainConfig,
) -> Result<(ModelParams<S>, TrainReport)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    for (name, set) in [("train", train_set), ("validation", val_set)] {
        if set.feature_dim() != model.spec.input_features || set.num_classes() != model.spec.num_classes {
            return Err(Error::shape(
                format!("{name} set"),
                format!("{} features, {} classes", model.spec.input_features, model.spec.num_classes),
                format!("{} features, {} classes", set.feature_dim(), set.num_classes()),
            ));
        }
    }

    let mut model = model.clone();
    let mut adam = AdamState::for_model(&model);
    let mut scheduler = ReduceOnPlateau::new(
        config.scheduler_factor,
        config.scheduler_patience,
        config.min_learning_rate,
    );
    let mut shuffle_rng = rng::stream(config.seed, Stream::Shuffle);
    let mut dropout_rng = rng::stream(config.seed, Stream::Dropout);
    let mut lr = config.learning_rate;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::new();
    let mut val_history = Vec::new();
    let mut best: Option<(usize, ModelParams<S>)> = None;
    let mut early_stopped = false;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0.0;
        for (batch_no, idx) in order.chunks(config.batch_size).enumerate() {
            let features = train_set.features.select(Axis(0), idx);
            let labels = train_set.labels_onehot.select(Axis(0), idx);
            let (probs, trace) = forward(&model, features.view(), Mode::Train, &mut dropout_rng)?;
            let loss = categorical_cross_entropy(probs.view(), labels.view())?.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: batch_no + 1,
                    message: format!("loss is {loss}"),
                });
            }
            let grads = backward(&model, &trace, labels.view())?;
            adam_update(&mut adam, &mut model, &grads, lr).map_err(|e| Error::Training {
                epoch,
                batch: batch_no + 1,
                message: e.to_string(),
            })?;
            loss_sum += loss * idx.len() as f64;
            correct += accuracy_of(probs.view(), labels.view()) * idx.len() as f64;
        }
        let n = train_set.len() as f64;
        let (val_loss, val_accuracy) = evaluate_loss(&model, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                batch: 0,
                message: format!("validation loss is {val_loss}"),
            });
        }
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct / n,
            val_loss,
            val_accuracy,
            learning_rate: lr,
        });
        val_history.push(val_loss);
        if best_index(&val_history) == Some(epoch - 1) {
            best = Some((epoch, model.clone()));
        }
        lr = scheduler.observe(val_loss, lr);
        if should_early_stop(&val_history, config.early_stop_patience) {
            early_stopped = true;
            break;
        }
    }

    let stopped_epoch = records.len();
    let (best_epoch, best_model) = best.expect("at least one epoch recorded");
    Ok((
        best_model,
        TrainReport {
            epochs: records,
            best_epoch,
            stopped_epoch,
            early_stopped,
            optimizer_steps: adam.timestep,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, ArrayD, IxDyn};

    #[test]
    fn cross_entropy_examples() {
        let ce = categorical_cross_entropy(array![[0.5_f64, 0.5]].view(), array![[1.0, 0.0]].view()).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-6);
        let perfect = categorical_cross_entropy(array![[1.0, 0.0]].view(), array![[1.0, 0.0]].view()).unwrap();
        assert!(perfect <= 1.01e-7);
        let one = categorical_cross_entropy(array![[0.3, 0.7]].view(), array![[0.0, 1.0]].view()).unwrap();
        let two = categorical_cross_entropy(
            array![[0.3, 0.7], [0.3, 0.7]].view(),
            array![[0.0, 1.0], [0.0, 1.0]].view(),
        )
        .unwrap();
        assert_eq!(one, two);
        let worst = categorical_cross_entropy(array![[0.0, 1.0]].view(), array![[1.0, 0.0]].view()).unwrap();
        assert!(worst <= 16.1181);
        assert!(categorical_cross_entropy(array![[0.5, 0.5]].view(), array![[1.0, 0.0, 0.0]].view()).is_err());
    }

    fn scalar_step(state: &mut AdamState<f64>, p: &mut ArrayD<f64>, g: f64, lr: f64) {
        let grads = vec![ArrayD::from_elem(IxDyn(&[1]), g)];
        state.step(vec![p.view_mut()], &grads, &[], lr).unwrap();
    }

    #[test]
    fn adam_hand_values() {
        let mut state = AdamState::for_shapes(&[vec![1]]);
        let mut p = ArrayD::zeros(IxDyn(&[1]));
        scalar_step(&mut state, &mut p, 1.0, 1e-3);
        assert!((p[[0]] + 0.001).abs() < 1e-8);
        scalar_step(&mut state, &mut p, 1.0, 1e-3);
        assert!((p[[0]] + 0.002).abs() < 1e-8);
        assert_eq!(state.timestep, 2);

        let mut fresh = AdamState::for_shapes(&[vec![1]]);
        let mut q = ArrayD::from_elem(IxDyn(&[1]), 0.25);
        scalar_step(&mut fresh, &mut q, 0.0, 1e-3);
        assert_eq!(q[[0]], 0.25);
    }

    #[test]
    fn adam_with_vanishing_rate_barely_moves() {
        let mut state = AdamState::for_shapes(&[vec![3]]);
        let mut p: ArrayD<f64> = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let grads = vec![ArrayD::from_shape_vec(IxDyn(&[3]), vec![5.0, -1e3, 1e-4]).unwrap()];
        state.step(vec![p.view_mut()], &grads, &[], 1e-300).unwrap();
        let max_delta = p.iter().zip(before.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_delta <= 1e-290);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_by_name() {
        let mut state = AdamState::for_shapes(&[vec![1]]);
        let mut p = ArrayD::zeros(IxDyn(&[1]));
        let grads = vec![ArrayD::from_elem(IxDyn(&[1]), f64::NAN)];
        let err = state
            .step(vec![p.view_mut()], &grads, &["layers.0.attractor".to_string()], 1e-3)
            .unwrap_err();
        assert!(err.to_string().contains("layers.0.attractor"));
        assert_eq!(state.timestep, 0);
    }

    #[test]
    fn plateau_schedule() {
        assert_eq!(reduce_on_plateau(&[1.0, 0.9], 1e-3, 0.5, 5, 1e-5), 1e-3);
        let flat = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(reduce_on_plateau(&flat[..5], 1e-3, 0.5, 5, 1e-5), 1e-3);
        assert_eq!(reduce_on_plateau(&flat, 1e-3, 0.5, 5, 1e-5), 5e-4);
        assert_eq!(reduce_on_plateau(&flat, 1.5e-5, 0.5, 5, 1e-5), 1e-5);
        // Counter resets after a reduction.
        let long = [1.0; 11];
        assert_eq!(reduce_on_plateau(&long[..10], 1e-3, 0.5, 5, 1e-5), 1e-3);
        assert_eq!(reduce_on_plateau(&long, 1e-3, 0.5, 5, 1e-5), 5e-4);
    }

    #[test]
    fn early_stop_boundaries() {
        let mut h: Vec<f64> = vec![5.0, 4.0, 3.0, 1.0];
        h.extend(std::iter::repeat_n(2.0, 10));
        assert_eq!(h.len(), 14);
        assert!(!should_early_stop(&h, 10));
        h.push(2.0);
        assert!(should_early_stop(&h, 10));

        let decreasing: Vec<f64> = (0..40).map(|i| 10.0 - i as f64 * 0.1).collect();
        for end in 1..=decreasing.len() {
            assert!(!should_early_stop(&decreasing[..end], 10));
        }

        let constant = [0.5; 12];
        assert!(!should_early_stop(&constant[..11], 10));
        assert!(should_early_stop(&constant, 10));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            scheduler_factor: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: 1e-6,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
