//! Classification metrics. Class 1 is the positive class throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::shape("prediction count", truth.len(), predicted.len()));
    }
    if truth.is_empty() {
        return Err(Error::shape("confusion matrix input", "at least one sample", 0));
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::Data(format!("label ({t}, {p}) outside {num_classes} classes")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Per-class scores; a flag is set wherever a 0/0 was replaced by 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_zero_division: bool,
    pub recall_zero_division: bool,
    pub f1_zero_division: bool,
}

pub fn precision_recall_f1(cm: &ConfusionMatrix, class: usize) -> ClassScores {
    let n = cm.num_classes();
    let tp = cm.counts[class][class] as f64;
    let predicted: u64 = (0..n).map(|i| cm.counts[i][class]).sum();
    let actual: u64 = cm.counts[class].iter().sum();
    let ratio = |num: f64, den: f64| if den == 0.0 { (0.0, true) } else { (num / den, false) };
    let (precision, pz) = ratio(tp, predicted as f64);
    let (recall, rz) = ratio(tp, actual as f64);
    let (f1, fz) = ratio(2.0 * precision * recall, precision + recall);
    ClassScores {
        precision,
        recall,
        f1,
        precision_zero_division: pz,
        recall_zero_division: rz,
        f1_zero_division: fz,
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        return 0.0;
    }
    cm.trace() as f64 / total as f64
}

fn check_scores<S: Scalar>(scores: &[S], positive: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != positive.len() {
        return Err(Error::shape("score count", positive.len(), scores.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs at least one positive and one negative sample".into()));
    }
    Ok((n_pos, n_neg))
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, with ties worth one half. Computed from mid-ranks in
/// O(n log n).
pub fn roc_auc<S: Scalar>(scores: &[S], positive: &[bool]) -> Result<f64> {
    let (n_pos, n_neg) = check_scores(scores, positive)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));
    // Sum of 1-based mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| positive[k]).count();
        rank_sum += mid_rank * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// ROC points `(fpr, tpr)` for thresholds at every distinct score (descending)
/// preceded by +inf, so the curve runs from (0, 0) to (1, 1).
pub fn roc_curve<S: Scalar>(scores: &[S], positive: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (n_pos, n_neg) = check_scores(scores, positive)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(points)
}

/// Trapezoidal area under a piecewise-linear curve.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassScores>,
    /// `None` when only one class is present among the true labels.
    pub auc_roc: Option<f64>,
    pub confusion_matrix: ConfusionMatrix,
    pub samples: u64,
}

impl MetricsReport {
    /// Builds the report from true labels and class-probability rows;
    /// predictions are the argmax (ties go to the lower class index).
    pub fn from_probabilities<S: Scalar>(truth: &[usize], probs: ndarray::ArrayView2<S>) -> Result<Self> {
        if probs.nrows() != truth.len() {
            return Err(Error::shape("probability rows", truth.len(), probs.nrows()));
        }
        let num_classes = probs.ncols();
        let predicted: Vec<usize> = probs
            .rows()
            .into_iter()
            .map(|r| crate::data::argmax(r.iter().copied()))
            .collect();
        let cm = confusion_matrix(truth, &predicted, num_classes)?;
        let per_class = (0..num_classes).map(|c| precision_recall_f1(&cm, c)).collect();
        let auc_roc = if num_classes == 2 {
            let scores: Vec<S> = probs.column(1).to_vec();
            let positive: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
            match roc_auc(&scores, &positive) {
                Ok(v) => Some(v),
                Err(Error::Metric(_)) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        Ok(Self {
            accuracy: accuracy(&cm),
            per_class,
            auc_roc,
            samples: cm.total(),
            confusion_matrix: cm,
        })
    }

    pub fn positive(&self) -> &ClassScores {
        &self.per_class[1]
    }
}
