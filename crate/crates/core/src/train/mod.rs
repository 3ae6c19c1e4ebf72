//! Adversarial training loop, optimizer and evaluation.

mod adam;
mod config;
mod eval;
mod metrics;
mod summary;
mod trainer;

pub use adam::{adam_update, AdamState};
pub use config::{GradAccum, Mode, TrainConfig};
pub use eval::{evaluate, predict, score, span_f1, EvalMetrics, Prediction};
pub use metrics::{read_records, MetricsRecord, MetricsWriter};
pub use summary::{pooled_std, MetricStats, ModeSummary, RunResult, Stat, Summary};
pub use trainer::{
    init_run, optimizer_for, scheduled_lr, train, train_batch, train_batch_traced, BatchOutcome,
    EvalSets, TraceEvent, Trained,
};
