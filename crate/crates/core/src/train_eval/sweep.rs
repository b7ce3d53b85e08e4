use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use crate::data::{Batch, LearnerSequence, Segment};
use crate::error::{KtError, Result};
use crate::model::{forward, ForwardOptions, KtModel};

pub const DEFAULT_SWEEP_LENGTHS: [usize; 6] = [10, 20, 50, 100, 200, 300];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSetting {
    pub length: usize,
    pub n_evaluated: usize,
    /// `None` when no learner is longer than `length`.
    pub report: Option<MetricsReport>,
}

impl SweepSetting {
    pub fn status(&self) -> &'static str {
        if self.report.is_some() {
            "ok"
        } else {
            "empty"
        }
    }

    pub fn report(&self) -> Result<&MetricsReport> {
        self.report.as_ref().ok_or(KtError::EmptySetting(self.length))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthSweepResult {
    pub settings: Vec<SweepSetting>,
}

impl LengthSweepResult {
    pub fn setting(&self, length: usize) -> Option<&SweepSetting> {
        self.settings.iter().find(|s| s.length == length)
    }

    /// Flat `length,metric,value,n_evaluated,status` rows; every (length,
    /// metric) pair is present and empty settings have a blank value.
    pub fn csv_rows(&self) -> Vec<[String; 5]> {
        let mut rows = Vec::new();
        for s in &self.settings {
            for (i, metric) in ["auc", "acc", "rmse", "w_acc"].into_iter().enumerate() {
                let value = s
                    .report
                    .as_ref()
                    .map(|r| r.metric_values()[i].1.to_string())
                    .unwrap_or_default();
                rows.push([
                    s.length.to_string(),
                    metric.to_string(),
                    value,
                    s.n_evaluated.to_string(),
                    s.status().to_string(),
                ]);
            }
        }
        rows
    }
}

pub const SWEEP_CSV_HEADER: [&str; 5] = ["length", "metric", "value", "n_evaluated", "status"];

/// Fixed-history evaluation: at setting `n`, every position `t ≥ n` of a
/// learner is predicted from exactly the `n` interactions before it, so a
/// learner of length `L` contributes `max(0, L − n)` predictions.
pub fn sweep_length(
    model: &KtModel,
    learners: &[LearnerSequence],
    lengths: &[usize],
    batch_size: usize,
) -> Result<LengthSweepResult> {
    if batch_size == 0 {
        return Err(KtError::InvalidArgument("batch_size must be positive".into()));
    }
    let mut settings = Vec::with_capacity(lengths.len());
    for &n in lengths {
        if n == 0 || n + 1 > model.config.max_tokens() {
            return Err(KtError::InvalidArgument(format!(
                "history length {n} needs 1 ≤ n ≤ max_len = {}",
                model.config.max_len
            )));
        }
        let windows: Vec<Segment> = learners
            .iter()
            .flat_map(|s| {
                (n..s.len()).map(move |t| Segment {
                    learner_id: s.learner_id.clone(),
                    segment: t - n,
                    start: t - n,
                    interactions: s.interactions[t - n..=t].to_vec(),
                })
            })
            .collect();
        if windows.is_empty() {
            settings.push(SweepSetting {
                length: n,
                n_evaluated: 0,
                report: None,
            });
            continue;
        }
        let mut preds = Vec::with_capacity(windows.len());
        let mut labels = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(batch_size) {
            let refs: Vec<&Segment> = chunk.iter().collect();
            let batch = Batch::from_segments(&refs, n + 1)?;
            let out = forward(model, &batch, ForwardOptions::default())?;
            let p = out.predictions();
            for r in 0..chunk.len() {
                preds.push(p[r * (n + 1) + n]);
                labels.push(batch.responses[r * (n + 1) + n] == 1);
            }
        }
        let mut report = MetricsReport::from_predictions(&preds, &labels, model.config.bias.kind)?;
        report.length = Some(n);
        settings.push(SweepSetting {
            length: n,
            n_evaluated: preds.len(),
            report: Some(report),
        });
    }
    Ok(LengthSweepResult { settings })
}
