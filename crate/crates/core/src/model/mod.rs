//! Transformer encoder over a named parameter store.

mod checkpoint;
mod config;
mod encoder;
mod store;

pub use checkpoint::{
    load_checkpoint, read_container, save_checkpoint, write_container, CheckpointError,
    Container, ContainerKind, FORMAT_VERSION,
};
pub use config::{layer_path, parse_layer_path, ModelConfig, LAYER_NORM_EPS, LAYER_PARAMS};
pub use encoder::{encoder_layer_forward, model_forward, predict, Batch, ParamBinder};
pub use store::{build_model, Param, ParamStatus, ParamStore};

pub(crate) use store::INIT_STD;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
