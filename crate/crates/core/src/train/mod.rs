//! Losses, dataset construction, the training loop and evaluation metrics.

mod dataset;
mod loss;
mod metrics;
mod trainer;

pub use dataset::{
    augment_subsample, build_modes, build_modes_with, multi_step_pairs, split_by_location, DatasetModes, LocationSplit,
    PointSelection, SplitSpec, MULTI_STEP_PAIRS_PER_RUN,
};
pub use loss::{loss_distance, loss_total, sample_loss_on_tape, SampleLoss};
pub use metrics::{evaluate, evaluate_identity, Metrics, SampleRecord, Summary};
pub use trainer::{finetune, train, EpochRecord, LrSchedule, TrainConfig, TrainMode, TrainOutcome};
