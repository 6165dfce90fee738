//! Optimization, validation, subject-level evaluation and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod eval;
pub mod metrics;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    encode_checkpoint, inspect_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CheckpointInfo,
};
pub use eval::{crop_probabilities, evaluate_subjects, mean_probabilities, predicted_class};
pub use metrics::{f1_and_accuracy, MetricsReport, SubjectResult};
pub use train::{BestSnapshot, LogRecord, SelectBy, TrainConfig, TrainState, Trainer};
