//! The trainable head, its loss and optimizer, and the training loop.

pub mod adam;
pub mod loss;
pub mod model;
pub mod train;

pub use adam::{adam_step, OptimizerState};
pub use loss::{cross_entropy, softmax2};
pub use model::{backward, forward, ForwardCache, ModelParams};
pub use train::{
    late_fuse_predict, lr_at, parse_operator_list, predict, train, train_images, Detector, EpochLog, FusionMode,
    ImageSet, TrainConfig, TrainLog,
};
