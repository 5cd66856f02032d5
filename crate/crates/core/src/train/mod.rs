//! Losses, optimizers, schedules, batch samplers, the training loop and
//! feature extraction.

mod features;
mod loss;
mod optim;
mod sampler;
mod trainer;

pub use features::{extract_features, l2_normalize_rows, Features};
pub use loss::{mine_hard_triplets, LossConfig, TripletSelection, DIST_EPS};
pub use optim::{OptimConfig, OptimKind, Optimizer, Schedule};
pub use sampler::{epoch_batches, BatchMode, SamplerStats};
pub use trainer::{format_log, EpochLog, TrainConfig, Trainer, LOG_HEADER};
