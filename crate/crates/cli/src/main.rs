//! `ltcnet` command-line tool: synthesize data, preprocess, train, evaluate,
//! predict, compare runs, and run the stacked ensemble.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

/// Declares a group of optional `--flag VALUE` settings that map one-to-one
/// onto config-file keys.
macro_rules! setting_group {
    ($name:ident { $($field:ident: $help:literal),* $(,)? }) => {
        #[derive(Args, Debug, Default, Clone)]
        struct $name {
            $(
                #[arg(long, value_name = "VALUE", help = $help)]
                $field: Option<String>,
            )*
        }

        impl $name {
            fn pairs(&self) -> Vec<(&'static str, &str)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push((stringify!($field), v.as_str()));
                    }
                )*
                out
            }
        }
    };
}

setting_group!(CommonFlags {
    seed: "Seed for every random stream [default: 42]",
});

setting_group!(PipelineFlags {
    label_column: "Label column name [default: CANCER_TYPE]",
    positive_token: "Label value of the positive class [default: NF1]",
    timesteps: "Timesteps each feature row is split into [default: 1]",
    train_fraction: "Training fraction [default: 0.64]",
    val_fraction: "Validation fraction [default: 0.16]",
    test_fraction: "Test fraction [default: 0.20]",
    normalization_fit: "Rows the z-score statistics are fitted on: train or all [default: train]",
});

setting_group!(ArchitectureFlags {
    cell: "Recurrent cell: ltc or lstm [default: ltc]",
    layers: "Number of recurrent layers [default: 2]",
    units: "Units per recurrent layer [default: 128]",
    dropout: "Dropout rate after each recurrent layer [default: 0.2]",
    step_size: "Solver step per timestep [default: 1.0]",
    unfold_steps: "Solver sub-steps per timestep [default: 6]",
});

setting_group!(TrainFlags {
    epochs: "Maximum epochs [default: 50]",
    batch_size: "Mini-batch size [default: 64]",
    learning_rate: "Initial Adam learning rate [default: 0.001]",
    early_stop_patience: "Epochs without validation improvement before stopping [default: 10]",
    scheduler_factor: "Learning-rate reduction factor on plateau [default: 0.5]",
    scheduler_patience: "Epochs without improvement before reducing [default: 5]",
    min_learning_rate: "Learning-rate floor [default: 0.00001]",
});

setting_group!(EnsembleFlags {
    bases: "Comma-separated base models from ltc, lstm, logreg [default: ltc,logreg]",
    meta_rows: "Rows the meta-model is fitted on: validation or training [default: validation]",
    logreg_learning_rate: "Logistic-regression step size [default: 0.1]",
    logreg_epochs: "Logistic-regression epochs [default: 500]",
    logreg_l2: "Logistic-regression l2 strength [default: 0.0001]",
});

setting_group!(SynthFlags {
    samples: "Number of rows [default: 2000]",
    features: "Number of feature columns [default: 32]",
    separation: "Distance between the class means [default: 2.0]",
    balance: "Fraction of positive rows [default: 0.5]",
    missing_fraction: "Fraction of cells left empty [default: 0.01]",
});

#[derive(Args, Debug, Default, Clone)]
struct ConfigFile {
    /// Flat key=value file; flags given on the command line take precedence
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

#[derive(Parser, Debug)]
#[command(name = "ltcnet", version, about = "Liquid time-constant recurrent classifier pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic two-class dataset CSV
    Synth {
        #[command(flatten)]
        file: ConfigFile,
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        synth: SynthFlags,
        /// Output CSV path
        #[arg(long, value_name = "PATH")]
        out: Option<String>,
    },
    /// Impute, split and normalize a dataset; write the normalized table
    Preprocess {
        #[command(flatten)]
        file: ConfigFile,
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        pipeline: PipelineFlags,
        /// Input CSV path
        #[arg(long, value_name = "PATH")]
        data: Option<String>,
        /// Output CSV path
        #[arg(long, value_name = "PATH")]
        out: Option<String>,
        /// Optional JSON file for the fitted preprocessing statistics
        #[arg(long, value_name = "PATH")]
        stats: Option<String>,
    },
    /// Train a network; write the model file and a training report
    Train {
        #[command(flatten)]
        file: ConfigFile,
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        pipeline: PipelineFlags,
        #[command(flatten)]
        architecture: ArchitectureFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Input CSV path
        #[arg(long, value_name = "PATH")]
        data: Option<String>,
        /// Output model file
        #[arg(long, value_name = "PATH")]
        model: Option<String>,
        /// Output training report (JSON)
        #[arg(long, value_name = "PATH")]
        report: Option<String>,
    },
    /// Score a model on labeled data; write metrics JSON and an ROC CSV
    Evaluate {
        #[command(flatten)]
        file: ConfigFile,
        /// Model file
        #[arg(long, value_name = "PATH")]
        model: Option<String>,
        /// Labeled CSV path
        #[arg(long, value_name = "PATH")]
        data: Option<String>,
        /// Rows to score: all, train, val or test (split as during training)
        #[arg(long, value_name = "SPLIT")]
        split: Option<String>,
        /// Output metrics JSON
        #[arg(long, value_name = "PATH")]
        out: Option<String>,
        /// Output ROC curve CSV [default: roc.csv next to --out]
        #[arg(long, value_name = "PATH")]
        roc: Option<String>,
    },
    /// Write class probabilities for every row of a CSV
    Predict {
        #[command(flatten)]
        file: ConfigFile,
        /// Model file
        #[arg(long, value_name = "PATH")]
        model: Option<String>,
        /// Input CSV (label column optional)
        #[arg(long, value_name = "PATH")]
        data: Option<String>,
        /// Output predictions CSV
        #[arg(long, value_name = "PATH")]
        out: Option<String>,
    },
    /// Welch t-test between two JSON files of per-seed metric values
    Compare {
        /// First run file
        run_a: PathBuf,
        /// Second run file
        run_b: PathBuf,
        /// Significance level [default: 0.05]
        #[arg(long, value_name = "VALUE")]
        alpha: Option<String>,
        /// Output verdict JSON [default: standard output]
        #[arg(long, value_name = "PATH")]
        out: Option<String>,
    },
    /// Train base models and a logistic-regression combiner over them
    Ensemble {
        #[command(flatten)]
        file: ConfigFile,
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        pipeline: PipelineFlags,
        #[command(flatten)]
        architecture: ArchitectureFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        ensemble: EnsembleFlags,
        /// Input CSV path
        #[arg(long, value_name = "PATH")]
        data: Option<String>,
        /// Output metrics JSON
        #[arg(long, value_name = "PATH")]
        out: Option<String>,
        /// Output meta-model coefficients CSV [default: coefficients.csv next to --out]
        #[arg(long, value_name = "PATH")]
        coefficients: Option<String>,
    },
}

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<ltcnet::Error> for Failure {
    fn from(e: ltcnet::Error) -> Self {
        use ltcnet::Error as E;
        let code = match e {
            E::Numeric(_) | E::Training { .. } | E::Contract(_) => 1,
            E::Shape { .. }
            | E::Config(_)
            | E::Data(_)
            | E::Metric(_)
            | E::Stats(_)
            | E::Parse { .. }
            | E::Persistence { .. }
            | E::UnsupportedVersion { .. }
            | E::Io(_) => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn build_config(file: &ConfigFile, pairs: &[(&'static str, &str)]) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &file.config {
        cfg.apply_file(path)?;
    }
    for (key, value) in pairs {
        cfg.set(key, value).map_err(ltcnet::Error::Config)?;
    }
    cfg.finalize()?;
    Ok(cfg)
}

fn paths<'a>(items: &[(&'static str, &'a Option<String>)]) -> Vec<(&'static str, &'a str)> {
    items
        .iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (*k, v)))
        .collect()
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { file, common, synth, out } => {
            let mut pairs = common.pairs();
            pairs.extend(synth.pairs());
            pairs.extend(paths(&[("out", &out)]));
            commands::synth(&build_config(&file, &pairs)?)
        }
        Command::Preprocess {
            file,
            common,
            pipeline,
            data,
            out,
            stats,
        } => {
            let mut pairs = common.pairs();
            pairs.extend(pipeline.pairs());
            pairs.extend(paths(&[("data", &data), ("out", &out), ("stats", &stats)]));
            commands::preprocess(&build_config(&file, &pairs)?)
        }
        Command::Train {
            file,
            common,
            pipeline,
            architecture,
            train,
            data,
            model,
            report,
        } => {
            let mut pairs = common.pairs();
            pairs.extend(pipeline.pairs());
            pairs.extend(architecture.pairs());
            pairs.extend(train.pairs());
            pairs.extend(paths(&[("data", &data), ("model", &model), ("report", &report)]));
            commands::train(&build_config(&file, &pairs)?)
        }
        Command::Evaluate {
            file,
            model,
            data,
            split,
            out,
            roc,
        } => {
            let pairs = paths(&[("model", &model), ("data", &data), ("split", &split), ("out", &out), ("roc", &roc)]);
            commands::evaluate(&build_config(&file, &pairs)?)
        }
        Command::Predict { file, model, data, out } => {
            let pairs = paths(&[("model", &model), ("data", &data), ("out", &out)]);
            commands::predict(&build_config(&file, &pairs)?)
        }
        Command::Compare { run_a, run_b, alpha, out } => {
            let pairs = paths(&[("alpha", &alpha), ("out", &out)]);
            let cfg = build_config(&ConfigFile::default(), &pairs)?;
            commands::compare(&cfg, &run_a, &run_b)
        }
        Command::Ensemble {
            file,
            common,
            pipeline,
            architecture,
            train,
            ensemble,
            data,
            out,
            coefficients,
        } => {
            let mut pairs = common.pairs();
            pairs.extend(pipeline.pairs());
            pairs.extend(architecture.pairs());
            pairs.extend(train.pairs());
            pairs.extend(ensemble.pairs());
            pairs.extend(paths(&[("data", &data), ("out", &out), ("coefficients", &coefficients)]));
            commands::ensemble(&build_config(&file, &pairs)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
