//! Desk-scale embedder training.

mod adam;
mod checkpoint;
mod config;
mod embedder;
mod metrics;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{lr_at_epoch, TrainConfig};
pub use embedder::{Activation, Dense, DenseGrad, Embedder, EmbedderGrads, ForwardCache};
pub use metrics::{
    metric_log_to_string, parse_metric_log, read_metric_log, write_metric_log, MetricRow,
    METRIC_LOG_HEADER,
};
pub use train::{max_pair_distance, mean_center_norm, EpochMetrics, EpochReport, Trainer};
