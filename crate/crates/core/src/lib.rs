//! Multimodal attention caption generation: a small reverse-mode
//! differentiation engine, recurrent encoders, temporal and modality-level
//! attention, an LSTM decoder with greedy and beam search, and the training
//! loop with its optimizers.
//!
//! Everything numeric is generic over [`Scalar`]. Training, decoding and
//! gradient checks run in `f64`; files on disk hold `f32`.

pub mod attention;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod format;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod lstm;
pub mod model;
pub mod params;
pub mod scalar;
pub mod search;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use fusion::FusionMode;
pub use graph::{Graph, Var};
pub use model::{FeatureSequence, InitState, ModalityConfig, Model, ModelConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use scalar::Scalar;
pub use search::{beam_search, greedy_decode, Hypothesis};
pub use tensor::Tensor;
pub use vocab::Vocabulary;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type FeatureSequence32 = FeatureSequence<f32>;
pub type FeatureSequence64 = FeatureSequence<f64>;
