//! CSV ingestion and the preprocessing chain:
//! impute -> binarize -> split -> z-score fit (train) -> z-score apply ->
//! one-hot -> reshape to samples x timesteps x features.
//!
//! Missing cells are represented as `NaN` until imputation.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;

pub const DEFAULT_LABEL_COLUMN: &str = "CANCER_TYPE";
pub const DEFAULT_POSITIVE_TOKEN: &str = "NF1";
/// Label written for negative samples by the synthetic generator.
pub const SYNTH_NEGATIVE_TOKEN: &str = "OTHER";

/// Parsed CSV: numeric feature matrix (NaN = missing) plus label strings.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub feature_names: Vec<String>,
    pub label_column: String,
    pub values: Array2<f64>,
    /// `None` when the file had no label column and labels were optional.
    pub labels: Option<Vec<String>>,
}

impl RawTable {
    pub fn num_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn labels(&self) -> Result<&[String]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Config(format!("label column `{}` not present", self.label_column)))
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    /// Writes the table in the input CSV schema; missing cells are empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        let labels = self.labels.as_deref();
        if labels.is_some() {
            header.push(&self.label_column);
        }
        out.write_record(&header).map_err(csv_io)?;
        let mut record = Vec::with_capacity(header.len());
        for (i, row) in self.values.rows().into_iter().enumerate() {
            record.clear();
            record.extend(row.iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }));
            if let Some(labels) = labels {
                record.push(labels[i].clone());
            }
            out.write_record(&record).map_err(csv_io)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("{other:?}")),
    }
}

/// Loads a CSV whose label column must be present.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<RawTable> {
    read_csv(File::open(path)?, label_column, true)
}

/// Loads a CSV where the label column may be absent (prediction input).
pub fn load_csv_unlabeled(path: impl AsRef<Path>, label_column: &str) -> Result<RawTable> {
    read_csv(File::open(path)?, label_column, false)
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan")
}

/// Parses CSV text: header row, numeric feature columns, one label column.
pub fn read_csv<R: Read>(reader: R, label_column: &str, require_label: bool) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let label_idx = headers.iter().position(|h| h == label_column);
    if label_idx.is_none() && require_label {
        return Err(Error::Config(format!("label column `{label_column}` not found in header")));
    }
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    if feature_names.is_empty() {
        return Err(Error::Data("no feature columns".into()));
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            let message = match e.kind() {
                csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
                    format!("expected {expected_len} fields, found {len}")
                }
                _ => e.to_string(),
            };
            Error::Parse { line, message }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        for (i, cell) in record.iter().enumerate() {
            if Some(i) == label_idx {
                labels.push(cell.to_string());
            } else if is_missing(cell) {
                values.push(f64::NAN);
            } else {
                let v = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("column `{}`: `{cell}` is not a finite number", &headers[i]),
                })?;
                values.push(v);
            }
        }
        rows += 1;
    }
    let values = Array2::from_shape_vec((rows, feature_names.len()), values)
        .map_err(|e| Error::Data(e.to_string()))?;
    Ok(RawTable {
        feature_names,
        label_column: label_column.to_string(),
        values,
        labels: label_idx.map(|_| labels),
    })
}

/// Replaces every missing cell with 0.0.
pub fn impute_nan_zero(table: &RawTable) -> RawTable {
    let mut out = table.clone();
    out.values.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v });
    out
}

/// Per-feature mean and population (ddof = 0) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn zscore_fit(rows: ArrayView2<f64>) -> Result<PreprocessStats> {
    let n = rows.nrows();
    if n == 0 {
        return Err(Error::Data("z-score fit needs at least one row".into()));
    }
    let mut mean = Vec::with_capacity(rows.ncols());
    let mut std = Vec::with_capacity(rows.ncols());
    for col in rows.columns() {
        let m = col.sum() / n as f64;
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let s = if lo == hi {
            0.0
        } else {
            (col.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt()
        };
        mean.push(m);
        std.push(s);
    }
    Ok(PreprocessStats { mean, std })
}

/// `(x - mean) / std` per feature; zero-variance features map to 0.
pub fn zscore_apply(rows: ArrayView2<f64>, stats: &PreprocessStats) -> Result<Array2<f64>> {
    if rows.ncols() != stats.mean.len() || stats.std.len() != stats.mean.len() {
        return Err(Error::shape("z-score feature count", stats.mean.len(), rows.ncols()));
    }
    let mut out = rows.to_owned();
    for (j, mut col) in out.columns_mut().into_iter().enumerate() {
        let (m, s) = (stats.mean[j], stats.std[j]);
        col.mapv_inplace(|v| if s == 0.0 { 0.0 } else { (v - m) / s });
    }
    Ok(out)
}

/// 1 for an exact match of `positive_token`, else 0.
pub fn binarize_labels(labels: &[String], positive_token: &str) -> Vec<usize> {
    labels.iter().map(|l| usize::from(l == positive_token)).collect()
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), num_classes));
    for (i, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::Data(format!(
                "label {label} at row {i} out of range for {num_classes} classes"
            )));
        }
        out[[i, label]] = 1.0;
    }
    Ok(out)
}

/// Splits each row of F features into `timesteps` consecutive chunks.
pub fn reshape_sequences(matrix: Array2<f64>, timesteps: usize) -> Result<Array3<f64>> {
    let (n, f) = matrix.dim();
    if timesteps == 0 || f % timesteps != 0 {
        return Err(Error::Config(format!(
            "{f} features cannot be split into {timesteps} equal timesteps"
        )));
    }
    let matrix = matrix.as_standard_layout().into_owned();
    matrix
        .into_shape_with_order((n, timesteps, f / timesteps))
        .map_err(|e| Error::Data(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.64,
            val: 0.16,
            test: 0.20,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) || self.train <= 0.0 {
            return Err(Error::Config(format!(
                "split fractions must be non-negative with a positive train share, got {parts:?}"
            )));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {parts:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub fractions: SplitFractions,
}

/// Rows assigned to a held-out split: `n * fraction` rounded up, so that
/// train receives what remains.
fn held_out_size(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction) - 1e-9).ceil().max(0.0) as usize
}

/// Seeded shuffle of `0..n`; test takes the tail, validation the block
/// before it, train the rest.
pub fn split_dataset(n: usize, fractions: SplitFractions, seed: u64) -> Result<SplitIndices> {
    fractions.validate()?;
    let n_test = held_out_size(n, fractions.test);
    let n_val = held_out_size(n, fractions.val);
    if n_test + n_val >= n {
        return Err(Error::Config(format!("{n} rows leave no training samples")));
    }
    if (fractions.val > 0.0 && n_val == 0) || (fractions.test > 0.0 && n_test == 0) {
        return Err(Error::Config(format!("{n} rows are too few for the requested splits")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Stream::Split));
    let test = idx.split_off(n - n_test);
    let val = idx.split_off(idx.len() - n_val);
    Ok(SplitIndices {
        train: idx,
        val,
        test,
        seed,
        fractions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub num_features: usize,
    /// Distance between the two class means.
    pub class_separation: f64,
    /// Fraction of positive samples.
    pub class_balance: f64,
    /// Fraction of cells blanked out as missing.
    pub missing_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 2000,
            num_features: 32,
            class_separation: 2.0,
            class_balance: 0.5,
            missing_fraction: 0.01,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples < 2 || self.num_features == 0 {
            return Err(Error::Config("synthetic data needs >= 2 samples and >= 1 feature".into()));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return Err(Error::Config("class_separation must be finite and >= 0".into()));
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return Err(Error::Config("class_balance must be in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return Err(Error::Config("missing_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Two unit-variance Gaussian clusters with means
/// `+-(separation / 2) * (1, ..., 1) / sqrt(F)`; positives are labeled "NF1".
pub fn synth_generate(config: &SynthConfig) -> Result<RawTable> {
    config.validate()?;
    let (n, f) = (config.num_samples, config.num_features);
    let mut rng = rng::stream(config.seed, Stream::Synth);
    let n_pos = ((n as f64 * config.class_balance).round() as usize).clamp(1, n - 1);
    let mut positive = vec![false; n];
    positive[..n_pos].fill(true);
    positive.shuffle(&mut rng);

    let offset = config.class_separation / 2.0 / (f as f64).sqrt();
    let mut values = Array2::zeros((n, f));
    for (mut row, &pos) in values.rows_mut().into_iter().zip(&positive) {
        let center = if pos { offset } else { -offset };
        for v in row.iter_mut() {
            let noise: f64 = rng.sample(StandardNormal);
            *v = center + noise;
        }
    }
    if config.missing_fraction > 0.0 {
        for v in values.iter_mut() {
            if rng.random::<f64>() < config.missing_fraction {
                *v = f64::NAN;
            }
        }
    }
    let labels = positive
        .iter()
        .map(|&p| if p { DEFAULT_POSITIVE_TOKEN } else { SYNTH_NEGATIVE_TOKEN }.to_string())
        .collect();
    Ok(RawTable {
        feature_names: (1..=f).map(|i| format!("g{i}")).collect(),
        label_column: DEFAULT_LABEL_COLUMN.to_string(),
        values,
        labels: Some(labels),
    })
}

/// Preprocessed samples: `features` is samples x timesteps x features.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset<S = f64> {
    pub features: Array3<S>,
    pub labels_onehot: Array2<S>,
    pub class_names: Vec<String>,
}

impl<S: Scalar> SequenceDataset<S> {
    pub fn new(features: Array3<S>, labels_onehot: Array2<S>, class_names: Vec<String>) -> Result<Self> {
        if features.dim().0 != labels_onehot.nrows() {
            return Err(Error::shape("dataset labels", features.dim().0, labels_onehot.nrows()));
        }
        if labels_onehot.ncols() != class_names.len() {
            return Err(Error::shape("class names", labels_onehot.ncols(), class_names.len()));
        }
        Ok(Self {
            features,
            labels_onehot,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.features.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn timesteps(&self) -> usize {
        self.features.dim().1
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim().2
    }

    pub fn num_classes(&self) -> usize {
        self.labels_onehot.ncols()
    }

    /// Class index per sample.
    pub fn labels(&self) -> Vec<usize> {
        self.labels_onehot.rows().into_iter().map(|r| argmax(r.iter().copied())).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), indices),
            labels_onehot: self.labels_onehot.select(Axis(0), indices),
            class_names: self.class_names.clone(),
        }
    }

    /// Samples x (timesteps * features), row-major.
    pub fn flattened(&self) -> Array2<S> {
        let (n, t, f) = self.features.dim();
        self.features
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, t * f))
            .expect("standard layout reshape")
    }

    pub fn cast<T: Scalar>(&self) -> SequenceDataset<T> {
        let conv = |v: &S| T::lit(v.to_f64_lossy());
        SequenceDataset {
            features: self.features.map(conv),
            labels_onehot: self.labels_onehot.map(conv),
            class_names: self.class_names.clone(),
        }
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<S: PartialOrd>(values: impl IntoIterator<Item = S>) -> usize {
    let mut best: Option<(usize, S)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match &best {
            Some((_, b)) if !(v > *b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map_or(0, |(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationFit {
    /// Fit statistics on the training split only.
    Train,
    /// Fit on every row before splitting.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub label_column: String,
    pub positive_token: String,
    pub timesteps: usize,
    pub fractions: SplitFractions,
    pub seed: u64,
    pub normalization_fit: NormalizationFit,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            label_column: DEFAULT_LABEL_COLUMN.into(),
            positive_token: DEFAULT_POSITIVE_TOKEN.into(),
            timesteps: 1,
            fractions: SplitFractions::default(),
            seed: 42,
            normalization_fit: NormalizationFit::Train,
        }
    }
}

/// Everything needed to reproduce preprocessing on new data; stored in the
/// model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub config: PipelineConfig,
    pub feature_names: Vec<String>,
    pub stats: PreprocessStats,
}

impl Preprocessing {
    pub fn class_names(&self) -> Vec<String> {
        class_names(&self.config.positive_token)
    }

    /// Impute, normalize and reshape the feature matrix of `raw`.
    pub fn transform_features(&self, raw: &RawTable) -> Result<Array3<f64>> {
        if raw.num_features() != self.feature_names.len() {
            return Err(Error::shape(
                "input feature count",
                self.feature_names.len(),
                raw.num_features(),
            ));
        }
        let imputed = impute_nan_zero(raw);
        let normalized = zscore_apply(imputed.values.view(), &self.stats)?;
        reshape_sequences(normalized, self.config.timesteps)
    }

    /// Full transform of a labeled table.
    pub fn transform(&self, raw: &RawTable) -> Result<SequenceDataset> {
        let features = self.transform_features(raw)?;
        let labels = binarize_labels(raw.labels()?, &self.config.positive_token);
        SequenceDataset::new(features, one_hot(&labels, 2)?, self.class_names())
    }

    /// Re-derives the split stored in the configuration for `n` rows.
    pub fn split(&self, n: usize) -> Result<SplitIndices> {
        split_dataset(n, self.config.fractions, self.config.seed)
    }
}

fn class_names(positive_token: &str) -> Vec<String> {
    vec![format!("not_{positive_token}"), positive_token.to_string()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: SequenceDataset,
    pub val: SequenceDataset,
    pub test: SequenceDataset,
    pub split: SplitIndices,
    pub preprocessing: Preprocessing,
}

/// Runs the whole preprocessing chain on a labeled table.
pub fn prepare(raw: &RawTable, config: &PipelineConfig) -> Result<PreparedData> {
    let imputed = impute_nan_zero(raw);
    let labels = binarize_labels(raw.labels()?, &config.positive_token);
    let split = split_dataset(raw.num_rows(), config.fractions, config.seed)?;
    let fit_rows = match config.normalization_fit {
        NormalizationFit::Train => imputed.values.select(Axis(0), &split.train),
        NormalizationFit::All => imputed.values.clone(),
    };
    let stats = zscore_fit(fit_rows.view())?;
    let normalized = zscore_apply(imputed.values.view(), &stats)?;
    let onehot = one_hot(&labels, 2)?;
    let features = reshape_sequences(normalized, config.timesteps)?;
    let all = SequenceDataset::new(features, onehot, class_names(&config.positive_token))?;
    Ok(PreparedData {
        train: all.subset(&split.train),
        val: all.subset(&split.val),
        test: all.subset(&split.test),
        split,
        preprocessing: Preprocessing {
            config: config.clone(),
            feature_names: raw.feature_names.clone(),
            stats,
        },
    })
}

/// Mean vector of the rows with `mask == true`.
pub fn class_mean(values: ArrayView2<f64>, mask: &[bool]) -> Array1<f64> {
    let mut sum = Array1::zeros(values.ncols());
    let mut count = 0.0;
    for (row, &m) in values.rows().into_iter().zip(mask) {
        if m {
            sum += &row;
            count += 1.0;
        }
    }
    sum / count
}
