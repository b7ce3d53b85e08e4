//! Training with early stopping, the metric suite, and the fixed-history
//! length sweep.

mod experiment;
mod metrics;
mod sweep;
mod train;

pub use experiment::{run_fold, FoldData, RunResult};
pub use metrics::{acc_rmse_wacc, auc, weighted_accuracy, MetricsReport, PointMetrics};
pub use sweep::{sweep_length, LengthSweepResult, SweepSetting, DEFAULT_SWEEP_LENGTHS, SWEEP_CSV_HEADER};
pub use train::{
    evaluate, make_batches, predict_segments, train, train_step, EarlyStopper, EpochLog, TrainConfig, TrainOutcome,
};
