//! Additive-margin and relaxed additive-margin softmax losses for a small
//! speaker-embedding model, with synthetic data and EER evaluation.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = numerics::Matrix<f64>;
pub type MarginConfig = losses::MarginConfig<f64>;
pub type LabeledLogits = losses::LabeledLogits<f64>;
pub type LossOutput = losses::LossOutput<f64>;
pub type HardnessReport = losses::HardnessReport<f64>;
pub type Model = model::Model<f64>;
pub type EncoderParams = model::EncoderParams<f64>;
pub type ClassWeights = model::ClassWeights<f64>;
pub type ModelGrads = model::ModelGrads<f64>;
pub type TrainConfig = train::TrainConfig<f64>;
pub type TrainHistory = train::TrainHistory<f64>;

pub use data::{Dataset, EmbeddingStore, Split, SyntheticSpec, Trial};
pub use eval::{EerResult, ScoreSet};
pub use losses::{FloorMode, LossVariant};
pub use model::ModelDims;
