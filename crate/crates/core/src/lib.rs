//! Sequence-to-set fine-grained entity typing: an attention LSTM label
//! decoder, per-instance attribute graphs for label induction, a
//! Hungarian-matched set loss and evaluation.

pub mod autodiff;
pub mod bag;
pub mod corpus;
pub mod deductive;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod synthetic;
pub mod tensor;

pub use corpus::{EmbeddingTable, Instance, LabelVocabulary, Tier};
pub use error::{Error, Result};
pub use pipeline::{Model, PredictionResult, RunConfig};
