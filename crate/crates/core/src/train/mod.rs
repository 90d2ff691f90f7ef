//! Objective, metrics, optimiser, data pipeline and the training loop.

pub mod data;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use data::{augment, collate, synth_dataset, Augmentation, LabelMap, SegmentationSample, SynthConfig};
pub use loss::DICE_EPS;
pub use metrics::{dsc, iou, mean_std, miou, AggregateReport, MetricsReport, Overlap};
pub use optim::{cosine_lr, sgd_step, LrSchedule, OptimizerState};
pub use trainer::{
    argmax_classes, evaluate, predict_masks, train_loop, train_seed, train_step, RunStatus, SeedRun, TrainConfig,
    TrainSummary, DEFAULT_SEEDS,
};
