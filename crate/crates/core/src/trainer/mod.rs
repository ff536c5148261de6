//! Training at desk scale: synthetic data, random crops, Adam on the RD
//! loss, reduce-on-plateau schedule, resumable checkpoints.

mod adam;
mod dataset;
mod schedule;
mod synthetic;
mod train;

pub use adam::{adam_step, global_norm, AdamConfig, AdamState};
pub use dataset::{stack, BatchIter, Dataset, IterState};
pub use schedule::Plateau;
pub use synthetic::{pattern_image, synthetic_images, Pattern};
pub use train::{
    evaluate, validation_set, RunOptions, StepStats, TrainConfig, TrainReport, Trainer, ValStats, RATE_LAMBDAS,
    VALIDATION_IMAGES, VALIDATION_SEED,
};
