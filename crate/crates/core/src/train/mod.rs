//! Losses, Adam, fine-tuning, backbone pretraining and checkpoints.

pub mod checkpoint;
pub mod finetune;
pub mod loss;
pub mod optim;
pub mod pretrain;

pub use checkpoint::{Checkpoint, CheckpointKind, RngState};
pub use finetune::{finetune, load_samples, EpochLog, FinetuneReport, Sample, TrainConfig, TrainState};
pub use loss::{boundary_weight, combined_loss, total_loss, wbce_loss, weight_batch, wiou_loss, LossConfig};
pub use optim::{Adam, AdamConfig};
pub use pretrain::{pretrain_backbone, PretrainReport};
