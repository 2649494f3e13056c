//! The reconstruction network: convolutional encoder, attention ConvLSTM per
//! encoder layer, and a decoder with skip concatenation.

mod checkpoint;
mod config;
mod network;
mod params;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{AblationMode, LayerSpec, ModelConfig};
pub use network::{
    attention, build, convlstm_step, decode, encode, forward, loss_and_grads, reconstruction_loss,
    sequence_loss, Built, CellState, CellVars, ForwardOutput,
};
pub use params::{param_specs, ModelParams, ParamSpec};
pub use train::{fit, fit_from, mean_loss, EpochLog, TrainConfig, TrainLog};
