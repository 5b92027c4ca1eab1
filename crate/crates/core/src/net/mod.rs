//! Model configuration, parameters, forward/backward passes and checkpoints.

mod checkpoint;
mod config;
mod model;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, read_checkpoint_config, save_checkpoint, FORMAT_VERSION, MAGIC,
};
pub use config::{count_params, ModelConfig, ParamCount};
pub use model::{
    argmax_rows, backward, backward_into, embed_features, forward, predict_topk, Dropout, FeatureBatch,
    ForwardOptions, ForwardTrace,
};
pub use params::*;
