use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KtError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Learner-level k-fold assignment with a validation hold-out per fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub val_frac: f64,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl FoldSplit {
    pub fn fold(&self, index: usize) -> Result<&Fold> {
        self.folds.get(index).ok_or(KtError::OutOfRange {
            what: "fold",
            index,
            size: self.folds.len(),
        })
    }

    /// Rows of `fold,learner_id,role` for the fold file.
    pub fn rows(&self) -> Vec<[String; 3]> {
        let mut rows = Vec::new();
        for (f, fold) in self.folds.iter().enumerate() {
            for (role, ids) in [("train", &fold.train), ("val", &fold.val), ("test", &fold.test)] {
                rows.extend(ids.iter().map(|id| [f.to_string(), id.clone(), role.to_string()]));
            }
        }
        rows
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_csv_rows(path, &["fold", "learner_id", "role"], self.rows())
    }
}

/// Shuffles learners with `seed`, cuts them into `k` near-equal test folds,
/// and holds out `round(val_frac · |train|)` of each fold's remaining
/// learners for validation.
pub fn kfold_split(learner_ids: &[String], k: usize, val_frac: f64, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(KtError::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if learner_ids.len() < k {
        return Err(KtError::InvalidArgument(format!(
            "{} learners cannot be split into {k} folds",
            learner_ids.len()
        )));
    }
    if !(0.0..1.0).contains(&val_frac) {
        return Err(KtError::InvalidArgument(format!(
            "val_frac must be in [0, 1), got {val_frac}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = learner_ids.to_vec();
    ids.shuffle(&mut rng);

    let n = ids.len();
    let bounds: Vec<usize> = (0..=k).map(|f| f * n / k).collect();
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let test = ids[bounds[f]..bounds[f + 1]].to_vec();
        let mut rest: Vec<String> = ids[..bounds[f]].iter().chain(&ids[bounds[f + 1]..]).cloned().collect();
        rest.shuffle(&mut rng);
        let n_val = (val_frac * rest.len() as f64).round() as usize;
        let val = rest.drain(..n_val.min(rest.len().saturating_sub(1))).collect();
        folds.push(Fold { train: rest, val, test });
    }
    Ok(FoldSplit {
        k,
        val_frac,
        seed,
        folds,
    })
}
