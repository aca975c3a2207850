//! Loss, augmentation, optimizer and the training loop.

mod augment;
mod config;
mod loss;
mod optim;
mod trainer;

pub use augment::{augment, flip_clip, reverse_clip, AugmentConfig, TrainClip};
pub use config::TrainConfig;
pub use loss::{bce_loss, clip_loss, frame_loss, soft_jaccard_loss, total_loss, LossParts, LossWeights, PROB_CLAMP, SJ_SMOOTH};
pub use optim::AdamW;
pub use trainer::{
    final_checkpoint_path, loss_csv_path, periodic_checkpoint_path, strip_moments, train, LossRecord, TrainResult,
    TrainSequence, Trainer,
};
