//! Time-series fault detector: sliding windows feed a BLSTM → LSTM → SELU
//! dense network whose hidden features are classified by an extra-trees
//! ensemble.
//!
//! Numeric code is generic over [`numerics::Scalar`] (`f32` or `f64`). The
//! aliases below fix the scalar to `f64`.

pub mod dataio;
pub mod datagen;
pub mod dense;
pub mod error;
pub mod extratrees;
pub mod metrics;
pub mod modelfile;
pub mod network;
pub mod numerics;
pub mod pipeline;
pub mod preprocess;
pub mod recurrent;
pub mod training;

pub use error::{Error, Result};
pub use numerics::Scalar;

pub type Matrix = numerics::Matrix<f64>;
pub type RawSeries = preprocess::RawSeries<f64>;
pub type WindowedDataset = preprocess::WindowedDataset<f64>;
pub type NormStats = preprocess::NormStats<f64>;
pub type LstmParams = recurrent::LstmParams<f64>;
pub type BlstmParams = recurrent::BlstmParams<f64>;
pub type DenseParams = dense::DenseParams<f64>;
pub type DeepNetParams = network::DeepNetParams<f64>;
pub type ForestModel = extratrees::ForestModel<f64>;
pub type TdlnModel = pipeline::TdlnModel<f64>;
pub type Detection = pipeline::Detection<f64>;
