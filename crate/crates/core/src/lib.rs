//! Differentiable search of tabular-to-voxel embeddings and 3D convolutional
//! demand forecasters, with baseline forecasters, fold-wise evaluation and
//! per-group model selection.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`.

pub mod cluster;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod nn;
pub mod plot;
pub mod scalar;
pub mod search_engine;
pub mod selector;
pub mod supernet3d;

pub use error::{Error, Result};

pub type Real = f64;
pub type Tensor = nn::Tensor<Real>;
pub type Tape = nn::Tape<Real>;
pub type EmbeddingParams = embedding::EmbeddingParams<Real>;
pub type ArchParams = supernet3d::ArchParams<Real>;
pub type Network = supernet3d::Network<Real>;
pub type SearchState = search_engine::SearchState<Real>;
pub type Samples = search_engine::Samples<Real>;
pub type Forecaster = search_engine::Forecaster<Real>;
