//! Joint multilingual training, validation and checkpoints.

mod checkpoint;
mod config;
mod trainer;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::TrainConfig;
pub use trainer::{
    corpus_nll, metrics_csv, parse_metrics_csv, train, validate, EarlyStop, EpochReport, MetricRow, NllSummary, Split,
    TrainData, TrainOutcome, Trainer, METRICS_HEADER,
};
