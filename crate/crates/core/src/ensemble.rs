//! Stacked generalization: base classifiers feed their class probabilities
//! to a logistic-regression meta-model. Logistic regression also serves as
//! the interpretable base model, with a coefficient report.

use ndarray::{concatenate, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{prepare, PipelineConfig, RawTable, SequenceDataset};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::network::{predict_proba, Architecture, CellKind, ModelParams};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::training::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegressionConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for LogisticRegressionConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 500,
            l2: 1e-4,
        }
    }
}

impl LogisticRegressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "logistic regression learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!("l2 strength must be non-negative, got {}", self.l2)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegressionParams<S> {
    pub weights: Array1<S>,
    pub bias: S,
    pub config: LogisticRegressionConfig,
}

impl<S: Scalar> LogisticRegressionParams<S> {
    pub fn zeros(num_features: usize, config: LogisticRegressionConfig) -> Self {
        Self {
            weights: Array1::zeros(num_features),
            bias: S::zero(),
            config,
        }
    }

    pub fn num_features(&self) -> usize {
        self.weights.len()
    }

    /// Probability of class 1 for each row.
    pub fn predict_positive(&self, x: ArrayView2<S>) -> Result<Array1<S>> {
        if x.ncols() != self.weights.len() {
            return Err(Error::shape("logistic regression features", self.weights.len(), x.ncols()));
        }
        Ok((x.dot(&self.weights) + self.bias).mapv(S::logistic))
    }
}

/// Full-batch gradient descent on the mean log loss plus `l2/2 * |w|^2`
/// (the bias is not penalized), starting from zero.
pub fn train_logistic_regression<S: Scalar>(
    x: ArrayView2<S>,
    y: &[usize],
    config: &LogisticRegressionConfig,
) -> Result<LogisticRegressionParams<S>> {
    config.validate()?;
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Data("logistic regression needs a non-empty design matrix".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::shape("logistic regression labels", x.nrows(), y.len()));
    }
    if let Some(bad) = y.iter().find(|&&v| v > 1) {
        return Err(Error::Data(format!("binary labels expected, found {bad}")));
    }
    let targets: Array1<S> = y.iter().map(|&v| S::lit(v as f64)).collect();
    let mut params = LogisticRegressionParams::zeros(x.ncols(), *config);
    let lr = S::lit(config.learning_rate);
    let l2 = S::lit(config.l2);
    let inv_n = S::lit(1.0 / x.nrows() as f64);
    for epoch in 0..config.epochs {
        let residual = params.predict_positive(x)? - &targets;
        let grad_w = x.t().dot(&residual) * inv_n + &params.weights * l2;
        let grad_b = residual.sum() * inv_n;
        params.weights.scaled_add(-lr, &grad_w);
        params.bias -= lr * grad_b;
        if !params.bias.is_finite() || params.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Training {
                epoch: epoch + 1,
                batch: 1,
                message: "logistic regression diverged".into(),
            });
        }
    }
    Ok(params)
}

/// Class probabilities `(1 - p, p)` per row.
pub fn predict_logistic_regression<S: Scalar>(
    params: &LogisticRegressionParams<S>,
    x: ArrayView2<S>,
) -> Result<Array2<S>> {
    let p = params.predict_positive(x)?;
    let mut out = Array2::zeros((p.len(), 2));
    for (mut row, &pi) in out.rows_mut().into_iter().zip(p.iter()) {
        row[0] = S::one() - pi;
        row[1] = pi;
    }
    Ok(out)
}

/// Features ordered by descending |weight|, ties by original position.
pub fn coefficients_report<S: Scalar>(
    params: &LogisticRegressionParams<S>,
    feature_names: &[String],
) -> Result<Vec<(String, f64)>> {
    if feature_names.len() != params.weights.len() {
        return Err(Error::shape("coefficient names", params.weights.len(), feature_names.len()));
    }
    let mut order: Vec<usize> = (0..feature_names.len()).collect();
    let weights: Vec<f64> = params.weights.iter().map(|w| w.to_f64_lossy()).collect();
    order.sort_by(|&a, &b| weights[b].abs().total_cmp(&weights[a].abs()).then(a.cmp(&b)));
    Ok(order.into_iter().map(|i| (feature_names[i].clone(), weights[i])).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    Ltc,
    Lstm,
    #[serde(rename = "logreg")]
    LogReg,
}

impl BaseKind {
    pub fn name(self) -> &'static str {
        match self {
            BaseKind::Ltc => "ltc",
            BaseKind::Lstm => "lstm",
            BaseKind::LogReg => "logreg",
        }
    }
}

impl std::str::FromStr for BaseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ltc" => Ok(BaseKind::Ltc),
            "lstm" => Ok(BaseKind::Lstm),
            "logreg" => Ok(BaseKind::LogReg),
            other => Err(Error::Config(format!(
                "unknown base model `{other}` (expected ltc, lstm or logreg)"
            ))),
        }
    }
}

/// Parses a comma-separated base list such as `ltc,logreg`.
pub fn parse_base_kinds(list: &str) -> Result<Vec<BaseKind>> {
    let kinds = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<_>>>()?;
    if kinds.is_empty() {
        return Err(Error::Config("at least one base model is required".into()));
    }
    Ok(kinds)
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaseModel<S> {
    Untrained(BaseKind),
    Network(ModelParams<S>),
    LogReg(LogisticRegressionParams<S>),
}

impl<S: Scalar> BaseModel<S> {
    pub fn kind(&self) -> BaseKind {
        match self {
            BaseModel::Untrained(k) => *k,
            BaseModel::Network(m) => match m.spec.layers[0].cell_kind {
                CellKind::Ltc => BaseKind::Ltc,
                CellKind::Lstm => BaseKind::Lstm,
            },
            BaseModel::LogReg(_) => BaseKind::LogReg,
        }
    }

    /// Class probabilities for samples x timesteps x features input.
    pub fn predict_proba(&self, features: ArrayView3<S>) -> Result<Array2<S>> {
        match self {
            BaseModel::Untrained(kind) => Err(Error::Contract(format!(
                "base model `{}` has not been trained",
                kind.name()
            ))),
            BaseModel::Network(model) => predict_proba(model, features),
            BaseModel::LogReg(params) => predict_logistic_regression(params, flatten(features).view()),
        }
    }
}

fn flatten<S: Scalar>(features: ArrayView3<S>) -> Array2<S> {
    let (n, t, f) = features.dim();
    features
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, t * f))
        .expect("standard layout reshape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedDataset<S> {
    /// Samples x (bases * classes); one probability block per base model.
    pub meta_features: Array2<S>,
    pub labels: Vec<usize>,
    pub block_width: usize,
}

impl<S: Scalar> StackedDataset<S> {
    pub fn num_bases(&self) -> usize {
        self.meta_features.ncols() / self.block_width.max(1)
    }
}

/// Concatenates base-model class probabilities in base order.
pub fn stack_predictions<S: Scalar>(bases: &[BaseModel<S>], features: ArrayView3<S>) -> Result<Array2<S>> {
    if bases.is_empty() {
        return Err(Error::Contract("at least one base model is required".into()));
    }
    let blocks = bases
        .iter()
        .map(|b| b.predict_proba(features))
        .collect::<Result<Vec<_>>>()?;
    let width = blocks[0].ncols();
    for (i, block) in blocks.iter().enumerate() {
        if block.ncols() != width {
            return Err(Error::shape(format!("base {i} class count"), width, block.ncols()));
        }
        for (r, row) in block.rows().into_iter().enumerate() {
            let sum = row.sum().to_f64_lossy();
            if !((sum - 1.0).abs() <= 1e-6) {
                return Err(Error::Numeric(format!(
                    "base {i} probabilities for row {r} sum to {sum}"
                )));
            }
        }
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    Ok(concatenate(Axis(1), &views).expect("blocks share the row count"))
}

pub fn build_stacked_dataset<S: Scalar>(
    bases: &[BaseModel<S>],
    meta_set: &SequenceDataset<S>,
) -> Result<StackedDataset<S>> {
    let meta_features = stack_predictions(bases, meta_set.features.view())?;
    Ok(StackedDataset {
        block_width: meta_features.ncols() / bases.len(),
        meta_features,
        labels: meta_set.labels(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinerModel<S> {
    pub bases: Vec<BaseModel<S>>,
    pub meta: LogisticRegressionParams<S>,
}

impl<S: Scalar> CombinerModel<S> {
    pub fn predict_proba(&self, features: ArrayView3<S>) -> Result<Array2<S>> {
        let stacked = stack_predictions(&self.bases, features)?;
        predict_logistic_regression(&self.meta, stacked.view())
    }

    /// Names of the meta-features, e.g. `base0_ltc:p_not_NF1`.
    pub fn meta_feature_names(&self, class_names: &[String]) -> Vec<String> {
        self.bases
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                class_names
                    .iter()
                    .map(move |c| format!("base{i}_{}:p_{c}", b.kind().name()))
            })
            .collect()
    }
}

/// Which rows the meta-model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaRows {
    /// The held-out validation split (no overlap with base training rows).
    Validation,
    /// The base models' own training rows, as a plain reading of the
    /// stacking recipe would have it.
    Training,
}

impl std::str::FromStr for MetaRows {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "validation" | "val" => Ok(MetaRows::Validation),
            "training" | "train" => Ok(MetaRows::Training),
            other => Err(Error::Config(format!(
                "unknown meta rows `{other}` (expected validation or training)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinerConfig {
    pub pipeline: PipelineConfig,
    /// Cell kind is overridden per base; the rest applies to every network base.
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub logistic: LogisticRegressionConfig,
    pub meta_rows: MetaRows,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            architecture: Architecture::default(),
            train: TrainConfig::default(),
            logistic: LogisticRegressionConfig::default(),
            meta_rows: MetaRows::Validation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseResult {
    pub kind: BaseKind,
    pub test_metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinerReport {
    pub base_kinds: Vec<BaseKind>,
    pub meta_rows: MetaRows,
    pub meta_feature_width: usize,
    pub meta_training_samples: usize,
    pub test_metrics: MetricsReport,
    pub base_results: Vec<BaseResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinerOutcome<S> {
    pub model: CombinerModel<S>,
    pub report: CombinerReport,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
}

fn train_base<S: Scalar>(
    kind: BaseKind,
    train_set: &SequenceDataset<S>,
    val_set: &SequenceDataset<S>,
    config: &CombinerConfig,
) -> Result<BaseModel<S>> {
    match kind {
        BaseKind::LogReg => {
            let params = train_logistic_regression(
                train_set.flattened().view(),
                &train_set.labels(),
                &config.logistic,
            )?;
            Ok(BaseModel::LogReg(params))
        }
        BaseKind::Ltc | BaseKind::Lstm => {
            let architecture = Architecture {
                cell_kind: if kind == BaseKind::Ltc { CellKind::Ltc } else { CellKind::Lstm },
                ..config.architecture
            };
            let spec = architecture.spec(train_set.feature_dim(), train_set.num_classes());
            let init = ModelParams::init(spec, &mut rng::stream(config.train.seed, Stream::Init))?;
            let (model, _) = train(&init, train_set, val_set, &config.train)?;
            Ok(BaseModel::Network(model))
        }
    }
}

/// Split; train each base on the training split; stack base predictions on
/// the meta rows; fit the meta-model; score the chain on the test split.
pub fn run_combiner_pipeline<S: Scalar>(
    raw: &RawTable,
    base_kinds: &[BaseKind],
    config: &CombinerConfig,
) -> Result<CombinerOutcome<S>> {
    if base_kinds.is_empty() {
        return Err(Error::Config("at least one base model is required".into()));
    }
    let prepared = prepare(raw, &config.pipeline)?;
    if prepared.train.is_empty() || prepared.val.is_empty() || prepared.test.is_empty() {
        return Err(Error::Config(
            "the combiner needs non-empty train, validation and test splits".into(),
        ));
    }
    let train_set: SequenceDataset<S> = prepared.train.cast();
    let val_set: SequenceDataset<S> = prepared.val.cast();
    let test_set: SequenceDataset<S> = prepared.test.cast();

    let bases = base_kinds
        .iter()
        .map(|&k| train_base(k, &train_set, &val_set, config))
        .collect::<Result<Vec<_>>>()?;

    let meta_set = match config.meta_rows {
        MetaRows::Validation => &val_set,
        MetaRows::Training => &train_set,
    };
    let stacked = build_stacked_dataset(&bases, meta_set)?;
    let meta = train_logistic_regression(stacked.meta_features.view(), &stacked.labels, &config.logistic)?;
    let model = CombinerModel { bases, meta };

    let truth = test_set.labels();
    let test_metrics = MetricsReport::from_probabilities(&truth, model.predict_proba(test_set.features.view())?.view())?;
    let base_results = model
        .bases
        .iter()
        .map(|b| {
            let probs = b.predict_proba(test_set.features.view())?;
            Ok(BaseResult {
                kind: b.kind(),
                test_metrics: MetricsReport::from_probabilities(&truth, probs.view())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(CombinerOutcome {
        report: CombinerReport {
            base_kinds: base_kinds.to_vec(),
            meta_rows: config.meta_rows,
            meta_feature_width: stacked.meta_features.ncols(),
            meta_training_samples: stacked.labels.len(),
            test_metrics,
            base_results,
        },
        model,
        class_names: prepared.preprocessing.class_names(),
        feature_names: prepared.preprocessing.feature_names,
    })
}

/// Stacks `(n, t, f)` blocks for convenience in tests and callers that hold
/// flattened matrices.
pub fn as_sequences<S: Scalar>(matrix: Array2<S>) -> Array3<S> {
    let (n, f) = matrix.dim();
    matrix.into_shape_with_order((n, 1, f)).expect("contiguous matrix")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn logistic_regression_separable_1d() {
        let x = array![[-1.0_f64], [1.0]];
        let p = train_logistic_regression(x.view(), &[0, 1], &LogisticRegressionConfig::default()).unwrap();
        let probs = predict_logistic_regression(&p, x.view()).unwrap();
        assert!(probs[[0, 1]] < 0.5 && probs[[1, 1]] > 0.5);
    }

    #[test]
    fn logistic_regression_constant_labels_predicts_majority() {
        let x = array![[0.3_f64, -1.0], [2.0, 0.5], [-0.7, 0.1]];
        let p = train_logistic_regression(x.view(), &[1, 1, 1], &LogisticRegressionConfig::default()).unwrap();
        // The optimum pushes the bias up without bound while the weights stay
        // small, so across the region spanned by the data every input is
        // assigned the majority class.
        let grid: Vec<f64> = (-4..=4).map(|i| i as f64 * 0.5).collect();
        let mut points = Vec::new();
        for &a in &grid {
            for &b in &grid {
                points.extend([a, b]);
            }
        }
        let points = Array2::from_shape_vec((grid.len() * grid.len(), 2), points).unwrap();
        let probs = predict_logistic_regression(&p, points.view()).unwrap();
        assert!(probs.column(1).iter().all(|&v| v > 0.5));
    }

    #[test]
    fn zero_epochs_and_zero_params() {
        let config = LogisticRegressionConfig {
            epochs: 0,
            ..Default::default()
        };
        let x = array![[1.0_f64, 2.0], [3.0, -4.0]];
        let p = train_logistic_regression(x.view(), &[0, 1], &config).unwrap();
        assert!(p.weights.iter().all(|&w| w == 0.0) && p.bias == 0.0);
        let probs = predict_logistic_regression(&p, x.view()).unwrap();
        assert!(probs.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn logistic_prediction_values() {
        let p = LogisticRegressionParams {
            weights: array![1.0_f64],
            bias: 0.0,
            config: LogisticRegressionConfig::default(),
        };
        let probs = predict_logistic_regression(&p, array![[3f64.ln()]].view()).unwrap();
        assert!((probs[[0, 1]] - 0.75).abs() < 1e-15);
        let extreme = predict_logistic_regression(&p, array![[30.0], [-30.0]].view()).unwrap();
        assert!(extreme.column(1).iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(matches!(
            predict_logistic_regression(&p, array![[1.0, 2.0]].view()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn coefficient_ordering() {
        let names: Vec<String> = ["f1", "f2", "f3"].iter().map(|s| s.to_string()).collect();
        let p = LogisticRegressionParams {
            weights: array![0.1_f64, -2.0, 0.5],
            bias: 0.0,
            config: LogisticRegressionConfig::default(),
        };
        let order: Vec<String> = coefficients_report(&p, &names).unwrap().into_iter().map(|(n, _)| n).collect();
        assert_eq!(order, ["f2", "f3", "f1"]);
        let zero = LogisticRegressionParams::<f64>::zeros(3, LogisticRegressionConfig::default());
        let order: Vec<String> = coefficients_report(&zero, &names).unwrap().into_iter().map(|(n, _)| n).collect();
        assert_eq!(order, ["f1", "f2", "f3"]);
        assert!(coefficients_report(&zero, &names[..2]).is_err());
    }

    #[test]
    fn stacking_shapes_and_contracts() {
        let config = LogisticRegressionConfig::default();
        let a = LogisticRegressionParams {
            weights: array![1.0_f64, -0.5],
            bias: 0.1,
            config,
        };
        let b = LogisticRegressionParams {
            weights: array![-0.3_f64, 2.0],
            bias: 0.0,
            config,
        };
        let features = as_sequences(array![[0.5_f64, 1.0], [-1.0, 0.2], [2.0, -0.3]]);
        let set = SequenceDataset::new(
            features.clone(),
            array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let two = build_stacked_dataset(&[BaseModel::LogReg(a.clone()), BaseModel::LogReg(b)], &set).unwrap();
        assert_eq!(two.meta_features.ncols(), 4);
        assert_eq!(two.num_bases(), 2);
        let one = build_stacked_dataset(&[BaseModel::LogReg(a.clone())], &set).unwrap();
        assert_eq!(one.meta_features, predict_logistic_regression(&a, set.flattened().view()).unwrap());
        assert_eq!(one, build_stacked_dataset(&[BaseModel::LogReg(a)], &set).unwrap());
        assert!(matches!(
            build_stacked_dataset(&[BaseModel::<f64>::Untrained(BaseKind::Ltc)], &set),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn base_list_parsing() {
        assert_eq!(parse_base_kinds("ltc,logreg").unwrap(), vec![BaseKind::Ltc, BaseKind::LogReg]);
        assert!(matches!(parse_base_kinds("ltc,forest"), Err(Error::Config(_))));
        assert!(parse_base_kinds("").is_err());
    }
}
