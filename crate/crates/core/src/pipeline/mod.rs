//! Training, checkpointing and joint inference.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod train;

pub use config::{BagAggregation, EncoderKind, MatchingPass, RunConfig};
pub use model::{
    EncoderSource, InstanceLoss, Model, ModelEncoder, PredictionRecord, PredictionResult,
    PreparedInstance,
};
pub use train::{
    dev_macro_f1, fit, prepare_all, train, Adam, AttributeSupply, EpochLog, Resources, TrainOutcome,
};
