mod accounting;
mod checkpoint;
mod infer;
mod model;
mod train;

pub use accounting::{
    affine_flops, block_flops, count_params, flop_estimate, matmul_flops, FlopReport, GroupCount, ParamCounts,
};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use infer::ActivationMap;
pub use model::{BitAlignModel, Diagnostics, ForwardOptions, TrainForward, TrainItem};
pub use train::{fit, fit_with, train_step, LossTrace, Momentum, StepRecord};

pub(crate) use checkpoint::hex;
