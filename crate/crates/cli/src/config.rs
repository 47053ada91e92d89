//! Run configuration: built-in defaults, overridden by a flat `key=value`
//! file, overridden by command-line flags. Every value is parsed and checked
//! as soon as it is set, and the assembled configuration is validated as a
//! whole before any work starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ltcnet::data::{NormalizationFit, PipelineConfig, SynthConfig};
use ltcnet::ensemble::{parse_base_kinds, BaseKind, CombinerConfig, LogisticRegressionConfig, MetaRows};
use ltcnet::network::{Architecture, CellKind};
use ltcnet::training::TrainConfig;
use ltcnet::Error;

/// Every key accepted in a config file, in documentation order.
pub const KEYS: &[&str] = &[
    "seed",
    "label_column",
    "positive_token",
    "timesteps",
    "train_fraction",
    "val_fraction",
    "test_fraction",
    "normalization_fit",
    "cell",
    "layers",
    "units",
    "dropout",
    "step_size",
    "unfold_steps",
    "epochs",
    "batch_size",
    "learning_rate",
    "early_stop_patience",
    "scheduler_factor",
    "scheduler_patience",
    "min_learning_rate",
    "logreg_learning_rate",
    "logreg_epochs",
    "logreg_l2",
    "bases",
    "meta_rows",
    "samples",
    "features",
    "separation",
    "balance",
    "missing_fraction",
    "alpha",
    "split",
    "data",
    "model",
    "report",
    "out",
    "roc",
    "coefficients",
    "stats",
];

/// Which rows `evaluate` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    All,
    Train,
    Val,
    Test,
}

impl FromStr for EvalSplit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(EvalSplit::All),
            "train" => Ok(EvalSplit::Train),
            "val" => Ok(EvalSplit::Val),
            "test" => Ok(EvalSplit::Test),
            other => Err(format!("unknown split `{other}` (expected all, train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub logistic: LogisticRegressionConfig,
    pub bases: Vec<BaseKind>,
    pub meta_rows: MetaRows,
    pub synth: SynthConfig,
    pub alpha: f64,
    pub split: EvalSplit,
    pub paths: BTreeMap<&'static str, PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            pipeline: PipelineConfig::default(),
            architecture: Architecture::default(),
            train: TrainConfig::default(),
            logistic: LogisticRegressionConfig::default(),
            bases: vec![BaseKind::Ltc, BaseKind::LogReg],
            meta_rows: MetaRows::Validation,
            synth: SynthConfig::default(),
            alpha: 0.05,
            split: EvalSplit::All,
            paths: BTreeMap::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("invalid value `{value}` for `{key}`: {e}"))
}

fn finite(key: &str, value: &str) -> Result<f64, String> {
    let v: f64 = parse(key, value)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{key}` must be finite, got {value}"))
    }
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        match key {
            "seed" => self.seed = parse(key, value)?,
            "label_column" => self.pipeline.label_column = nonempty(key, value)?,
            "positive_token" => self.pipeline.positive_token = nonempty(key, value)?,
            "timesteps" => self.pipeline.timesteps = parse(key, value)?,
            "train_fraction" => self.pipeline.fractions.train = finite(key, value)?,
            "val_fraction" => self.pipeline.fractions.val = finite(key, value)?,
            "test_fraction" => self.pipeline.fractions.test = finite(key, value)?,
            "normalization_fit" => {
                self.pipeline.normalization_fit = match value {
                    "train" => NormalizationFit::Train,
                    "all" => NormalizationFit::All,
                    other => return Err(format!("unknown normalization_fit `{other}` (expected train or all)")),
                }
            }
            "cell" => self.architecture.cell_kind = CellKind::from_str(value).map_err(|e| e.to_string())?,
            "layers" => self.architecture.depth = parse(key, value)?,
            "units" => self.architecture.units = parse(key, value)?,
            "dropout" => self.architecture.dropout_rate = finite(key, value)?,
            "step_size" => self.architecture.solver.step_size = finite(key, value)?,
            "unfold_steps" => self.architecture.solver.unfold_steps = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = finite(key, value)?,
            "early_stop_patience" => self.train.early_stop_patience = parse(key, value)?,
            "scheduler_factor" => self.train.scheduler_factor = finite(key, value)?,
            "scheduler_patience" => self.train.scheduler_patience = parse(key, value)?,
            "min_learning_rate" => self.train.min_learning_rate = finite(key, value)?,
            "logreg_learning_rate" => self.logistic.learning_rate = finite(key, value)?,
            "logreg_epochs" => self.logistic.epochs = parse(key, value)?,
            "logreg_l2" => self.logistic.l2 = finite(key, value)?,
            "bases" => self.bases = parse_base_kinds(value).map_err(|e| e.to_string())?,
            "meta_rows" => self.meta_rows = MetaRows::from_str(value).map_err(|e| e.to_string())?,
            "samples" => self.synth.num_samples = parse(key, value)?,
            "features" => self.synth.num_features = parse(key, value)?,
            "separation" => self.synth.class_separation = finite(key, value)?,
            "balance" => self.synth.class_balance = finite(key, value)?,
            "missing_fraction" => self.synth.missing_fraction = finite(key, value)?,
            "alpha" => self.alpha = finite(key, value)?,
            "split" => self.split = parse(key, value)?,
            _ => match KEYS.iter().find(|k| **k == key) {
                Some(&path_key) => {
                    self.paths.insert(path_key, PathBuf::from(nonempty(key, value)?));
                }
                None => return Err(format!("unknown setting `{key}`")),
            },
        }
        Ok(())
    }

    /// Applies a `key=value` file; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), Error> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_error = |message: String| Error::Parse { line: i as u64 + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_error(format!("expected key=value, found `{line}`")))?;
            self.set(key.trim(), value).map_err(parse_error)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        self.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Propagates the single seed to every component and checks the
    /// combination of settings.
    pub fn finalize(&mut self) -> Result<(), Error> {
        self.pipeline.seed = self.seed;
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        if self.pipeline.timesteps == 0 {
            return Err(Error::Config("timesteps must be at least 1".into()));
        }
        self.pipeline.fractions.validate()?;
        self.train.validate()?;
        self.logistic.validate()?;
        self.synth.validate()?;
        self.architecture.spec(1, 2).validate()?;
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn path(&self, key: &str) -> Result<&Path, Error> {
        self.paths
            .get(key)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Config(format!("missing required --{key} (or `{key}=` in the config file)")))
    }

    pub fn combiner(&self) -> CombinerConfig {
        CombinerConfig {
            pipeline: self.pipeline.clone(),
            architecture: self.architecture,
            train: self.train,
            logistic: self.logistic,
            meta_rows: self.meta_rows,
        }
    }
}

fn nonempty(key: &str, value: &str) -> Result<String, String> {
    if value.is_empty() {
        Err(format!("`{key}` must not be empty"))
    } else {
        Ok(value.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags_precedence() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nepochs = 7\nunits=16 # trailing\n\ncell=lstm\n").unwrap();
        cfg.set("epochs", "9").unwrap();
        cfg.finalize().unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.architecture.units, 16);
        assert_eq!(cfg.architecture.cell_kind, CellKind::Lstm);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values_with_line_numbers() {
        let mut cfg = RunConfig::default();
        match cfg.apply_text("epochs=3\nwibble=1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(cfg.apply_text("epochs=three"), Err(Error::Parse { line: 1, .. })));
        assert!(cfg.apply_text("no equals sign").is_err());
        assert!(cfg.set("bases", "ltc,forest").is_err());
    }

    #[test]
    fn seed_reaches_every_component() {
        let mut cfg = RunConfig::default();
        cfg.set("seed", "7").unwrap();
        cfg.finalize().unwrap();
        assert_eq!((cfg.pipeline.seed, cfg.train.seed, cfg.synth.seed), (7, 7, 7));
    }

    #[test]
    fn whole_config_validation() {
        let mut cfg = RunConfig::default();
        cfg.set("train_fraction", "0.9").unwrap();
        assert!(cfg.finalize().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("dropout", "1.0").unwrap();
        assert!(cfg.finalize().is_err());
    }
}
