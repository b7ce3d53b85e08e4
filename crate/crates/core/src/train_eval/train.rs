use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use crate::data::{Batch, Segment};
use crate::error::{KtError, Result};
use crate::model::{forward, ForwardOptions, KtModel};
use crate::numerics::{AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub fold: usize,
    /// Leave out the first position of every window (no history) when
    /// scoring.
    #[serde(default)]
    pub exclude_first: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 512,
            max_epochs: 300,
            patience: 10,
            seed: 0,
            fold: 0,
            exclude_first: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(KtError::InvalidArgument(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(KtError::InvalidArgument(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Tracks the best validation score and decides when to stop.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records the score of `epoch` (1-based); returns whether it is a new
    /// best. Only strict improvements count.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, b)) if score <= b => {
                self.since_best += 1;
                false
            }
            _ => {
                self.best = Some((epoch, score));
                self.since_best = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean of the per-batch training losses.
    pub train_loss: f64,
    /// Validation AUC, or `None` when there is no validation set.
    pub val_auc: Option<f64>,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: KtModel,
    pub best_epoch: usize,
    /// Best selection score: validation AUC, or negative training loss
    /// without a validation set.
    pub best_score: f64,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Groups `segments` into padded batches of at most `batch_size` rows in the
/// given order.
pub fn make_batches(segments: &[&Segment], batch_size: usize) -> Result<Vec<Batch>> {
    segments
        .chunks(batch_size)
        .map(|chunk| {
            let pad = chunk.iter().map(|s| s.len()).max().unwrap_or(0);
            Batch::from_segments(chunk, pad)
        })
        .collect()
}

/// Predictions and labels at every scored position of `segments`.
pub fn predict_segments(
    model: &KtModel,
    segments: &[Segment],
    batch_size: usize,
    exclude_first: bool,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let refs: Vec<&Segment> = segments.iter().collect();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for batch in make_batches(&refs, batch_size)? {
        let out = forward(model, &batch, ForwardOptions::default())?;
        let p = out.predictions();
        for (i, (&ok, &r)) in batch.valid_mask.iter().zip(&batch.responses).enumerate() {
            if ok && !(exclude_first && i % batch.len == 0) {
                preds.push(p[i]);
                labels.push(r == 1);
            }
        }
    }
    Ok((preds, labels))
}

pub fn evaluate(
    model: &KtModel,
    segments: &[Segment],
    batch_size: usize,
    exclude_first: bool,
) -> Result<MetricsReport> {
    let (p, l) = predict_segments(model, segments, batch_size, exclude_first)?;
    MetricsReport::from_predictions(&p, &l, model.config.bias.kind)
}

fn diverged(e: KtError, epoch: usize, batch: usize) -> KtError {
    match e {
        KtError::NonFinite(_) | KtError::NonFiniteGrad(_) => KtError::Diverged { epoch, batch },
        other => other,
    }
}

/// One optimization step on `batch`; returns the batch loss.
pub fn train_step(model: &mut KtModel, adam: &mut AdamState, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut out = forward(
        model,
        batch,
        ForwardOptions {
            dropout_rng: Some(rng),
            ..Default::default()
        },
    )?;
    let loss = out.tape.bce_loss(out.preds, &batch.labels(), &batch.valid_mask)?;
    let value = out.tape.value(loss).item();
    if !value.is_finite() {
        return Err(KtError::NonFinite("loss"));
    }
    out.tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = out.params.iter().map(|&v| out.tape.grad_or_zeros(v)).collect();
    let names = model.names().to_vec();
    adam.step(model.params_mut(), &grads, &names)?;
    Ok(value)
}

/// Mini-batch Adam on `train` with early stopping on validation AUC. With an
/// empty `val` the training loss drives model selection instead.
/// `on_epoch` sees each log entry as it is produced.
pub fn train(
    mut model: KtModel,
    train: &[Segment],
    val: &[Segment],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    crate::numerics::tune_allocator();
    if train.is_empty() {
        return Err(KtError::Empty("training set"));
    }
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut adam = AdamState::new(adam_cfg, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = model.clone();
    let mut log = Vec::new();
    let mut order: Vec<&Segment> = train.iter().collect();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let batches = make_batches(&order, cfg.batch_size)?;
        let mut total = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            total += train_step(&mut model, &mut adam, batch, &mut rng).map_err(|e| diverged(e, epoch, bi))?;
        }
        let train_loss = total / batches.len() as f64;
        let (val_auc, score) = if val.is_empty() {
            (None, -train_loss)
        } else {
            let m = evaluate(&model, val, cfg.batch_size, cfg.exclude_first)
                .map_err(|e| diverged(e, epoch, batches.len()))?;
            (Some(m.auc), m.auc)
        };
        let improved = stopper.observe(epoch, score);
        if improved {
            best = model.clone();
        }
        let entry = EpochLog {
            epoch,
            train_loss,
            val_auc,
            improved,
        };
        on_epoch(&entry);
        log.push(entry);
        if stopper.should_stop() {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    let (best_epoch, best_score) = stopper.best().expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_score,
        log,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_after_patience() {
        let mut s = EarlyStopper::new(10);
        let scores = [0.6, 0.7, 0.8];
        let mut stop_at = None;
        for epoch in 1..=50 {
            let v = scores.get(epoch - 1).copied().unwrap_or(0.8);
            s.observe(epoch, v);
            if s.should_stop() {
                stop_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stop_at, Some(13));
        assert_eq!(s.best(), Some((3, 0.8)));
    }

    #[test]
    fn best_never_decreases() {
        let mut s = EarlyStopper::new(100);
        let mut seen = f64::NEG_INFINITY;
        for (e, v) in [0.5, 0.4, 0.7, 0.7, 0.65, 0.9, 0.1].into_iter().enumerate() {
            s.observe(e + 1, v);
            seen = seen.max(v);
            assert_eq!(s.best().unwrap().1, seen);
        }
    }
}
