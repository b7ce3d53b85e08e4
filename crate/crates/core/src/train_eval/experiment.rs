use std::collections::HashSet;

use super::metrics::MetricsReport;
use super::train::{evaluate, train, EpochLog, TrainConfig, TrainOutcome};
use crate::data::{window_all, Fold, LearnerSequence, Segment};
use crate::error::Result;
use crate::model::{init_params, ModelConfig};

/// Windowed segments of one fold.
#[derive(Clone, Debug)]
pub struct FoldData {
    pub train: Vec<Segment>,
    pub val: Vec<Segment>,
    pub test: Vec<Segment>,
}

impl FoldData {
    pub fn new(sequences: &[LearnerSequence], fold: &Fold, max_len: usize) -> Self {
        let pick = |ids: &[String]| {
            let set: HashSet<&str> = ids.iter().map(String::as_str).collect();
            window_all(
                sequences.iter().filter(|s| set.contains(s.learner_id.as_str())),
                max_len,
            )
        };
        FoldData {
            train: pick(&fold.train),
            val: pick(&fold.val),
            test: pick(&fold.test),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub test: MetricsReport,
}

/// Initializes a model from `train_cfg.seed`, trains it on the fold and
/// scores the best checkpoint on the test learners.
pub fn run_fold(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &FoldData,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<RunResult> {
    let model = init_params(model_cfg, train_cfg.seed)?;
    let outcome = train(model, &data.train, &data.val, train_cfg, on_epoch)?;
    let mut test = evaluate(&outcome.best, &data.test, train_cfg.batch_size, train_cfg.exclude_first)?;
    test.fold = Some(train_cfg.fold);
    test.seed = Some(train_cfg.seed);
    Ok(RunResult { outcome, test })
}
