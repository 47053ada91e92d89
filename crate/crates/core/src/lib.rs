//! Liquid time-constant recurrent classifier: fused ODE cells, BPTT training,
//! preprocessing, metrics, statistical tests and stacked ensembles.

// Guards like `!(x > 0.0)` are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cell;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod network;
pub mod persist;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision model, the default used by the command-line tool.
pub type Model = network::ModelParams<f64>;
/// Single-precision model.
pub type ModelF32 = network::ModelParams<f32>;
pub type LtcCell = cell::LtcCellParams<f64>;
pub type LstmCell = cell::LstmCellParams<f64>;
pub type Dataset = data::SequenceDataset<f64>;
