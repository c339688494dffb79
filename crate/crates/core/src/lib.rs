//! Emotion recognition in conversation with speaker biographies.
//!
//! Conversations are encoded window by window, utterance vectors attend over
//! the dialogue, and a speaker vector is built either from speaker-relation
//! attention or from LLM-written speaker biographies. A second path renders
//! instruction prompts for fine-tuning a causal LM with low-rank adapters.

pub mod attention;
pub mod autodiff;
pub mod bios;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod instruct;
pub mod llm;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use attention::{AttentionParams, RelationKind, RelationMask};
pub use autodiff::{Gradients, Graph, Var};
pub use bios::{BiographyStore, ExtractOptions, SpeakerBiography};
pub use corpus::{Conversation, LabelVocabulary, Split, Utterance};
pub use encoder::{EncoderBackend, ToyEncoder, ToyEncoderConfig};
pub use error::{Error, Result};
pub use eval::{weighted_f1, EvalReport};
pub use llm::{CompletionRequest, CompletionResponse, EndpointConfig, LlmClient};
pub use model::{ErcModel, ModelConfig, Prediction, Variant};
pub use params::{OptimizerKind, ParamStore};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Graph64 = Graph<f64>;
pub type ErcModel64 = ErcModel<f64>;
pub type ErcModel32 = ErcModel<f32>;
pub type ToyEncoder64 = ToyEncoder<f64>;
pub type ToyEncoder32 = ToyEncoder<f32>;
