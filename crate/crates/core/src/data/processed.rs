//! On-disk layout of a preprocessed dataset directory:
//!
//! - `vocab.csv`: `item,index`
//! - `sequences.csv`: `learner_id,segment,position,item_index,correct`, one
//!   row per interaction of each full learner history; `segment` is
//!   `position / max_len`
//! - `folds.csv`: `fold,learner_id,role` with role `train|val|test`
//! - `stats.json`: [`DatasetStats`]

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::preprocess::{Interaction, LearnerSequence, Vocab};
use super::split::{Fold, FoldSplit};
use crate::error::{KtError, Result};

pub const SEQUENCES_HEADER: [&str; 5] = ["learner_id", "segment", "position", "item_index", "correct"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub learners: usize,
    pub interactions: usize,
    pub items: usize,
    /// Percentage of correct answers, 0–100.
    pub pct_correct: f64,
    pub max_len: usize,
    pub segments: usize,
    pub folds: usize,
    pub val_frac: f64,
    pub split_seed: u64,
}

impl DatasetStats {
    pub fn compute(seqs: &[LearnerSequence], vocab: &Vocab, max_len: usize, split: &FoldSplit) -> Self {
        let interactions: usize = seqs.iter().map(LearnerSequence::len).sum();
        let correct = seqs.iter().flat_map(|s| &s.interactions).filter(|i| i.correct).count();
        DatasetStats {
            learners: seqs.len(),
            interactions,
            items: vocab.len(),
            pct_correct: 100.0 * correct as f64 / interactions.max(1) as f64,
            max_len,
            segments: seqs.iter().map(|s| s.len().div_ceil(max_len)).sum(),
            folds: split.k,
            val_frac: split.val_frac,
            split_seed: split.seed,
        }
    }

    /// The human-readable summary printed by `preprocess`.
    pub fn summary(&self) -> String {
        format!(
            "learners      {}\ninteractions  {}\nitems         {}\n% correct     {:.2}\n",
            self.learners, self.interactions, self.items, self.pct_correct
        )
    }
}

#[derive(Clone, Debug)]
pub struct ProcessedData {
    pub sequences: Vec<LearnerSequence>,
    pub vocab: Vocab,
    pub split: FoldSplit,
    pub stats: DatasetStats,
}

impl ProcessedData {
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.vocab.write_csv(&dir.join("vocab.csv"))?;
        let max_len = self.stats.max_len;
        let rows = self.sequences.iter().flat_map(|s| {
            s.interactions.iter().enumerate().map(move |(t, it)| {
                [
                    s.learner_id.clone(),
                    (t / max_len).to_string(),
                    t.to_string(),
                    it.item.to_string(),
                    u8::from(it.correct).to_string(),
                ]
            })
        });
        crate::io::write_csv_rows(&dir.join("sequences.csv"), &SEQUENCES_HEADER, rows)?;
        self.split.write_csv(&dir.join("folds.csv"))?;
        crate::io::write_json(&dir.join("stats.json"), &self.stats)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let vocab = Vocab::read_csv(&dir.join("vocab.csv"))?;
        let stats: DatasetStats = crate::io::read_json(&dir.join("stats.json"))?;
        let sequences = read_sequences(&dir.join("sequences.csv"), vocab.len())?;
        let folds = read_folds(&dir.join("folds.csv"))?;
        let split = FoldSplit {
            k: folds.len(),
            val_frac: stats.val_frac,
            seed: stats.split_seed,
            folds,
        };
        Ok(ProcessedData {
            sequences,
            vocab,
            split,
            stats,
        })
    }

    pub fn learner(&self, id: &str) -> Option<&LearnerSequence> {
        self.sequences.iter().find(|s| s.learner_id == id)
    }

    /// Learners with the given role in `fold`; `all` selects every learner.
    pub fn learners_for(&self, fold: usize, role: &str) -> Result<Vec<LearnerSequence>> {
        if role == "all" {
            return Ok(self.sequences.clone());
        }
        let f = self.split.fold(fold)?;
        let ids = match role {
            "train" => &f.train,
            "val" => &f.val,
            "test" => &f.test,
            _ => {
                return Err(KtError::InvalidArgument(format!(
                    "unknown role `{role}` (expected train|val|test|all)"
                )))
            }
        };
        let set: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
        Ok(self
            .sequences
            .iter()
            .filter(|s| set.contains(s.learner_id.as_str()))
            .cloned()
            .collect())
    }
}

fn open(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::Reader::from_path(path).map_err(|e| KtError::io(path, std::io::Error::other(e)))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> KtError {
    KtError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn read_sequences(path: &Path, vocab_size: usize) -> Result<Vec<LearnerSequence>> {
    let mut rdr = open(path)?;
    let mut order: Vec<LearnerSequence> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (n, row) in rdr.records().enumerate() {
        let line = n + 2;
        let row = row.map_err(|e| parse_err(path, line, e.to_string()))?;
        if row.len() != SEQUENCES_HEADER.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields", SEQUENCES_HEADER.len()),
            ));
        }
        let num = |i: usize| -> Result<usize> {
            row[i]
                .parse()
                .map_err(|_| parse_err(path, line, format!("`{}` is not a non-negative integer", &row[i])))
        };
        let (position, item) = (num(2)?, num(3)?);
        if item >= vocab_size {
            return Err(parse_err(
                path,
                line,
                format!("item index {item} outside vocabulary of {vocab_size}"),
            ));
        }
        let correct = match &row[4] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(path, line, format!("correct must be 0 or 1, got `{other}`"))),
        };
        let slot = *index.entry(row[0].to_string()).or_insert_with(|| {
            order.push(LearnerSequence {
                learner_id: row[0].to_string(),
                interactions: Vec::new(),
            });
            order.len() - 1
        });
        let seq = &mut order[slot];
        if position != seq.interactions.len() {
            return Err(parse_err(path, line, format!("position {position} out of order")));
        }
        seq.interactions.push(Interaction { item, correct });
    }
    Ok(order)
}

fn read_folds(path: &Path) -> Result<Vec<Fold>> {
    let mut rdr = open(path)?;
    let mut folds: Vec<Fold> = Vec::new();
    for (n, row) in rdr.records().enumerate() {
        let line = n + 2;
        let row = row.map_err(|e| parse_err(path, line, e.to_string()))?;
        if row.len() != 3 {
            return Err(parse_err(path, line, "expected `fold,learner_id,role`"));
        }
        let f: usize = row[0].parse().map_err(|_| parse_err(path, line, "bad fold index"))?;
        while folds.len() <= f {
            folds.push(Fold {
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            });
        }
        let id = row[1].to_string();
        match &row[2] {
            "train" => folds[f].train.push(id),
            "val" => folds[f].val.push(id),
            "test" => folds[f].test.push(id),
            other => return Err(parse_err(path, line, format!("unknown role `{other}`"))),
        }
    }
    Ok(folds)
}
