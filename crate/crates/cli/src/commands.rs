//! Subcommand implementations. Every output file is produced in memory and
//! then written atomically, so a failed run leaves no partial files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use ltcnet::data::{binarize_labels, load_csv, load_csv_unlabeled, prepare, synth_generate, Preprocessing, RawTable};
use ltcnet::ensemble::{coefficients_report, run_combiner_pipeline, BaseModel, CombinerReport};
use ltcnet::metrics::{roc_curve, MetricsReport};
use ltcnet::network::{predict_proba, ModelParams};
use ltcnet::persist::{load_model, save_model, write_atomic};
use ltcnet::rng::{self, Stream};
use ltcnet::stats::{compare_models, proportion_ci, ConfidenceInterval, TTestResult};
use ltcnet::training::{train as train_model, TrainReport};
use ltcnet::{Error, Model};

use crate::config::{EvalSplit, RunConfig};
use crate::Failure;

const CONFIDENCE_LEVEL: f64 = 0.95;

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, Failure> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Numeric(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    Ok(text.into_bytes())
}

/// Renders rows as CSV text; values are written with `Display`, which is
/// the shortest representation that round-trips.
fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, Failure> {
    let mut out = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(format!("cannot render CSV: {e}"));
    out.write_record(header).map_err(io)?;
    for row in rows {
        out.write_record(&row).map_err(io)?;
    }
    out.into_inner()
        .map_err(|e| Error::Data(format!("cannot render CSV: {e}")).into())
}

/// `name` in the same directory as `anchor`.
fn sibling(anchor: &Path, name: &str) -> PathBuf {
    anchor.with_file_name(name)
}

fn class_counts(labels: &[usize]) -> [usize; 2] {
    let positives = labels.iter().filter(|&&l| l == 1).count();
    [labels.len() - positives, positives]
}

pub fn synth(cfg: &RunConfig) -> Result<(), Failure> {
    let out = cfg.path("out")?;
    let table = synth_generate(&cfg.synth)?;
    let mut bytes = Vec::new();
    table.write_csv(&mut bytes)?;
    write_atomic(out, &bytes)?;
    let [neg, pos] = class_counts(&binarize_labels(table.labels()?, &cfg.pipeline.positive_token));
    println!("wrote {}: {} rows, {} features", out.display(), table.num_rows(), table.num_features());
    println!("class counts: {} negative, {} positive", neg, pos);
    Ok(())
}

pub fn preprocess(cfg: &RunConfig) -> Result<(), Failure> {
    let raw = load_csv(cfg.path("data")?, &cfg.pipeline.label_column)?;
    let prepared = prepare(&raw, &cfg.pipeline)?;
    let normalized = prepared.preprocessing.transform_features(&raw)?;
    let (n, t, f) = normalized.dim();
    let flat = normalized
        .into_shape_with_order((n, t * f))
        .map_err(|e| Error::Data(e.to_string()))?;
    let labels = binarize_labels(raw.labels()?, &cfg.pipeline.positive_token);
    let mut split_of = vec![""; n];
    for (name, rows) in [
        ("train", &prepared.split.train),
        ("val", &prepared.split.val),
        ("test", &prepared.split.test),
    ] {
        for &r in rows {
            split_of[r] = name;
        }
    }
    let mut header = vec!["row_index", "split", "label"];
    header.extend(raw.feature_names.iter().map(String::as_str));
    let rows = (0..n).map(|i| {
        let mut row = vec![i.to_string(), split_of[i].to_string(), labels[i].to_string()];
        row.extend(flat.row(i).iter().map(|v| v.to_string()));
        row
    });
    let table = csv_bytes(&header, rows)?;
    let stats = match cfg.paths.get("stats") {
        Some(path) => Some((path, json_bytes(&prepared.preprocessing)?)),
        None => None,
    };
    let out = cfg.path("out")?;
    write_atomic(out, &table)?;
    if let Some((path, bytes)) = stats {
        write_atomic(path, &bytes)?;
    }
    println!(
        "wrote {}: {} train, {} val, {} test rows",
        out.display(),
        prepared.split.train.len(),
        prepared.split.val.len(),
        prepared.split.test.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct SplitSizes {
    train: usize,
    val: usize,
    test: usize,
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    parameter_count: usize,
    split_sizes: SplitSizes,
    training: &'a TrainReport,
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let model_path = cfg.path("model")?;
    let report_path = cfg.path("report")?;
    let raw = load_csv(cfg.path("data")?, &cfg.pipeline.label_column)?;
    let prepared = prepare(&raw, &cfg.pipeline)?;
    let spec = cfg
        .architecture
        .spec(prepared.train.feature_dim(), prepared.train.num_classes());
    let init = Model::init(spec, &mut rng::stream(cfg.seed, Stream::Init))?;
    let started = Instant::now();
    let (model, report) = train_model(&init, &prepared.train, &prepared.val, &cfg.train)?;
    let output = TrainOutput {
        parameter_count: model.parameter_count(),
        split_sizes: SplitSizes {
            train: prepared.train.len(),
            val: prepared.val.len(),
            test: prepared.test.len(),
        },
        training: &report,
    };
    let report_bytes = json_bytes(&output)?;
    save_model(model_path, &model, Some(&prepared.preprocessing))?;
    write_atomic(report_path, &report_bytes)?;
    let best = report.best();
    println!(
        "trained {} epochs in {:.1}s (best epoch {}: val loss {:.4}, val accuracy {:.4}{})",
        report.stopped_epoch,
        started.elapsed().as_secs_f64(),
        report.best_epoch,
        best.val_loss,
        best.val_accuracy,
        if report.early_stopped { ", stopped early" } else { "" }
    );
    println!("wrote {} and {}", model_path.display(), report_path.display());
    Ok(())
}

fn load_with_preprocessing(path: &Path) -> Result<(Model, Preprocessing), Failure> {
    let (model, preprocessing) = load_model::<f64>(path)?;
    let preprocessing = preprocessing.ok_or_else(|| Error::Persistence {
        field: "preprocessing".into(),
        message: "model file carries no preprocessing statistics".into(),
    })?;
    Ok((model, preprocessing))
}

fn check_feature_count(model: &ModelParams<f64>, prep: &Preprocessing, raw: &RawTable) -> Result<(), Failure> {
    if raw.num_features() != prep.feature_names.len() {
        return Err(Error::shape(
            "data feature columns",
            format!("{} (as in training)", prep.feature_names.len()),
            raw.num_features(),
        )
        .into());
    }
    let per_step = prep.feature_names.len() / prep.config.timesteps;
    if per_step != model.spec.input_features {
        return Err(Error::shape("model input features", model.spec.input_features, per_step).into());
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluationOutput<'a> {
    split: EvalSplit,
    class_names: Vec<String>,
    metrics: &'a MetricsReport,
    accuracy_ci: ConfidenceInterval,
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), Failure> {
    let out = cfg.path("out")?;
    let roc_path = cfg.paths.get("roc").cloned().unwrap_or_else(|| sibling(out, "roc.csv"));
    let (model, prep) = load_with_preprocessing(cfg.path("model")?)?;
    let raw = load_csv(cfg.path("data")?, &prep.config.label_column)?;
    check_feature_count(&model, &prep, &raw)?;
    let dataset = prep.transform(&raw)?;
    let dataset = match cfg.split {
        EvalSplit::All => dataset,
        split => {
            let indices = prep.split(dataset.len())?;
            let rows = match split {
                EvalSplit::Train => indices.train,
                EvalSplit::Val => indices.val,
                _ => indices.test,
            };
            if rows.is_empty() {
                return Err(Error::Config("the requested split has no rows".into()).into());
            }
            dataset.subset(&rows)
        }
    };
    let probs = predict_proba(&model, dataset.features.view())?;
    let truth = dataset.labels();
    let metrics = MetricsReport::from_probabilities(&truth, probs.view())?;
    let correct = metrics.confusion_matrix.trace();
    let output = EvaluationOutput {
        split: cfg.split,
        class_names: prep.class_names(),
        accuracy_ci: proportion_ci(correct, metrics.samples, CONFIDENCE_LEVEL)?,
        metrics: &metrics,
    };
    let report = json_bytes(&output)?;
    let roc = if metrics.auc_roc.is_some() {
        let positive: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        let scores = probs.column(1).to_vec();
        let points = roc_curve(&scores, &positive)?;
        Some(csv_bytes(
            &["fpr", "tpr"],
            points.into_iter().map(|(x, y)| vec![x.to_string(), y.to_string()]),
        )?)
    } else {
        None
    };
    write_atomic(out, &report)?;
    match roc {
        Some(bytes) => write_atomic(&roc_path, &bytes)?,
        None => eprintln!("warning: only one class present; ROC curve not written"),
    }
    println!(
        "{} rows: accuracy {:.4}, AUC {}",
        metrics.samples,
        metrics.accuracy,
        metrics.auc_roc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
    );
    Ok(())
}

pub fn predict(cfg: &RunConfig) -> Result<(), Failure> {
    let out = cfg.path("out")?;
    let (model, prep) = load_with_preprocessing(cfg.path("model")?)?;
    let raw = load_csv_unlabeled(cfg.path("data")?, &prep.config.label_column)?;
    check_feature_count(&model, &prep, &raw)?;
    let features = prep.transform_features(&raw)?;
    let probs = predict_proba(&model, features.view())?;
    let rows = probs.rows().into_iter().enumerate().map(|(i, p)| {
        // Exact 0.5/0.5 ties go to class 0.
        let label = usize::from(p[1] > p[0]);
        vec![i.to_string(), p[0].to_string(), p[1].to_string(), label.to_string()]
    });
    let bytes = csv_bytes(&["row_index", "p_not_nf1", "p_nf1", "predicted_label"], rows)?;
    write_atomic(out, &bytes)?;
    println!("wrote {} predictions to {}", probs.nrows(), out.display());
    Ok(())
}

/// Reads a run file: a JSON array of numbers, or an object whose `values`
/// field is one.
fn read_runs(path: &Path) -> Result<Vec<f64>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
        Error::Config(format!(
            "{}: malformed JSON at line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;
    let array = match &value {
        serde_json::Value::Array(a) => a,
        serde_json::Value::Object(o) => match o.get("values") {
            Some(serde_json::Value::Array(a)) => a,
            _ => return Err(Error::Config(format!("{}: expected a `values` array", path.display())).into()),
        },
        _ => return Err(Error::Config(format!("{}: expected an array of numbers", path.display())).into()),
    };
    array
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_f64().ok_or_else(|| {
                Error::Config(format!("{}: entry {i} is not a number", path.display())).into()
            })
        })
        .collect()
}

#[derive(Serialize)]
struct CompareOutput {
    runs_a: usize,
    runs_b: usize,
    alpha: f64,
    test: TTestResult,
    significant: bool,
    verdict: &'static str,
}

pub fn compare(cfg: &RunConfig, run_a: &Path, run_b: &Path) -> Result<(), Failure> {
    let a = read_runs(run_a)?;
    let b = read_runs(run_b)?;
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Config(format!(
            "each run file needs at least two values (got {} and {})",
            a.len(),
            b.len()
        ))
        .into());
    }
    let comparison = compare_models(&a, &b, cfg.alpha)?;
    let output = CompareOutput {
        runs_a: a.len(),
        runs_b: b.len(),
        alpha: cfg.alpha,
        test: comparison.test,
        significant: comparison.significant,
        verdict: if comparison.significant { "significant" } else { "not significant" },
    };
    let bytes = json_bytes(&output)?;
    match cfg.paths.get("out") {
        Some(path) => write_atomic(path, &bytes)?,
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}

#[derive(Serialize)]
struct Coefficient {
    feature: String,
    weight: f64,
}

#[derive(Serialize)]
struct EnsembleOutput<'a> {
    class_names: &'a [String],
    combiner: &'a CombinerReport,
    /// Coefficients of each logistic-regression base over the input
    /// features, largest magnitude first.
    logreg_base_coefficients: Vec<Vec<Coefficient>>,
}

pub fn ensemble(cfg: &RunConfig) -> Result<(), Failure> {
    let out = cfg.path("out")?;
    let coefficients_path = cfg
        .paths
        .get("coefficients")
        .cloned()
        .unwrap_or_else(|| sibling(out, "coefficients.csv"));
    let raw = load_csv(cfg.path("data")?, &cfg.pipeline.label_column)?;
    let outcome = run_combiner_pipeline::<f64>(&raw, &cfg.bases, &cfg.combiner())?;
    let to_rows = |pairs: Vec<(String, f64)>| {
        pairs
            .into_iter()
            .map(|(feature, weight)| Coefficient { feature, weight })
            .collect::<Vec<_>>()
    };
    let logreg_base_coefficients = outcome
        .model
        .bases
        .iter()
        .filter_map(|b| match b {
            BaseModel::LogReg(params) => Some(coefficients_report(params, &outcome.feature_names).map(to_rows)),
            _ => None,
        })
        .collect::<Result<Vec<_>, _>>()?;
    let output = EnsembleOutput {
        class_names: &outcome.class_names,
        combiner: &outcome.report,
        logreg_base_coefficients,
    };
    let report = json_bytes(&output)?;
    let meta_names = outcome.model.meta_feature_names(&outcome.class_names);
    let meta = coefficients_report(&outcome.model.meta, &meta_names)?;
    let coefficients = csv_bytes(
        &["feature", "weight"],
        meta.into_iter().map(|(name, w)| vec![name, w.to_string()]),
    )?;
    write_atomic(out, &report)?;
    write_atomic(&coefficients_path, &coefficients)?;
    let m = &outcome.report.test_metrics;
    println!(
        "combiner over {} bases (meta width {}): test accuracy {:.4}, AUC {}",
        outcome.report.base_kinds.len(),
        outcome.report.meta_feature_width,
        m.accuracy,
        m.auc_roc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
    );
    for base in &outcome.report.base_results {
        println!("  base {}: test accuracy {:.4}", base.kind.name(), base.test_metrics.accuracy);
    }
    Ok(())
}
