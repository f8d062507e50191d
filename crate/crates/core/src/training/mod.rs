//! Masked-language-model training: loss, Adam, the step loop, evaluation,
//! metrics and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod trainer;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, TableRecord};
pub use config::TrainConfig;
pub use trainer::{evaluate, mlm_loss, prepare_data, EvalMetrics, MetricRow, MetricsLog, Split, TrainData, Trainer};
