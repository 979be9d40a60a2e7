//! Trainable models: affine coupling flow, autoregressive pixel model and
//! representation encoders.

mod ar;
mod checkpoint;
mod encoder;
mod flow;
pub mod nn;
mod train;

pub use ar::{ArModel, ArSpec};
pub use checkpoint::{checkpoint_load, checkpoint_save, decode_checkpoint, encode_checkpoint, FORMAT_VERSION};
pub use encoder::{Autoencoder, Encoder, Mlp, MlpSpec};
pub use flow::{Conditioner, CouplingFlow, FlowInit, FlowSpec, FlowTrace};
pub use train::{fit, train_ar, train_autoencoder, train_flow, Adam, Parameterized, Schedule, TrainConfig, TrainError, Trained};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("expected input of dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite activations in layer {layer}")]
    NonFinite { layer: usize },
    #[error("symbol {value} outside alphabet of size {alphabet}")]
    Symbol { value: u8, alphabet: usize },
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("checkpoint format version {found}, this build reads {supported}")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
}

/// Any model that can be checkpointed.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Flow(CouplingFlow),
    Ar(ArModel),
    Encoder(Encoder),
}
