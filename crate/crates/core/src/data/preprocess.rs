use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::records::InteractionRecord;
use crate::error::{KtError, Result};

/// Minimum number of interactions a learner needs to be kept.
pub const DEFAULT_MIN_LEN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub item: usize,
    pub correct: bool,
}

/// A learner's full, time-ordered history over dense item indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerSequence {
    pub learner_id: String,
    pub interactions: Vec<Interaction>,
}

impl LearnerSequence {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

/// Dense item index ↔ original id, assigned in order of first appearance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_items(items: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            if index.insert(it.clone(), i).is_some() {
                return Err(KtError::InvalidArgument(format!("duplicate vocabulary item `{it}`")));
            }
        }
        Ok(Vocab { items, index })
    }

    fn intern(&mut self, item: &str) -> usize {
        if let Some(&i) = self.index.get(item) {
            return i;
        }
        let i = self.items.len();
        self.items.push(item.to_string());
        self.index.insert(item.to_string(), i);
        i
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn item(&self, index: usize) -> Option<&str> {
        self.items.get(index).map(String::as_str)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    /// Writes the two-column `item,index` file.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_csv_rows(
            path,
            &["item", "index"],
            self.items.iter().enumerate().map(|(i, it)| [it.clone(), i.to_string()]),
        )
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| KtError::io(path, std::io::Error::other(e)))?;
        let mut pairs = Vec::new();
        for (n, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| KtError::io(path, std::io::Error::other(e)))?;
            let bad = || KtError::Parse {
                path: path.display().to_string(),
                line: n + 2,
                msg: "expected `item,index`".into(),
            };
            let item = row.get(0).ok_or_else(bad)?.to_string();
            let idx: usize = row.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?;
            pairs.push((idx, item));
        }
        pairs.sort_by_key(|p| p.0);
        if pairs.iter().enumerate().any(|(i, p)| p.0 != i) {
            return Err(KtError::Parse {
                path: path.display().to_string(),
                line: 0,
                msg: "indices are not dense 0..n".into(),
            });
        }
        Vocab::from_items(pairs.into_iter().map(|p| p.1).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub min_len: usize,
    /// Use concept ids (rather than question ids) as the item vocabulary.
    pub concept_as_question: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            min_len: DEFAULT_MIN_LEN,
            concept_as_question: true,
        }
    }
}

/// Groups records by learner (learners in order of first appearance), orders
/// each learner's records by timestamp (stable, so ties and missing
/// timestamps keep input order), drops learners shorter than `min_len`, and
/// maps items to dense indices.
pub fn preprocess(records: &[InteractionRecord], opts: PreprocessOptions) -> Result<(Vec<LearnerSequence>, Vocab)> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&InteractionRecord>> = HashMap::new();
    for r in records {
        groups
            .entry(r.learner_id.as_str())
            .or_insert_with(|| {
                order.push(r.learner_id.as_str());
                Vec::new()
            })
            .push(r);
    }

    let mut vocab = Vocab::default();
    let mut out = Vec::new();
    for learner in order {
        let mut recs = groups.remove(learner).unwrap_or_default();
        if recs.len() < opts.min_len {
            continue;
        }
        if recs.iter().all(|r| r.timestamp_ms.is_some()) {
            recs.sort_by_key(|r| r.timestamp_ms);
        }
        let interactions = recs
            .iter()
            .map(|r| {
                let key = if opts.concept_as_question {
                    &r.concept_id
                } else {
                    &r.question_id
                };
                Interaction {
                    item: vocab.intern(key),
                    correct: r.correct,
                }
            })
            .collect();
        out.push(LearnerSequence {
            learner_id: learner.to_string(),
            interactions,
        });
    }
    if out.is_empty() {
        return Err(KtError::Empty("preprocess (no learner meets the minimum length)"));
    }
    Ok((out, vocab))
}

/// Inverse of [`preprocess`] up to item naming: each interaction becomes a
/// record whose question and concept ids are the vocabulary item.
pub fn sequences_to_records(seqs: &[LearnerSequence], vocab: &Vocab) -> Vec<InteractionRecord> {
    seqs.iter()
        .flat_map(|s| {
            s.interactions.iter().enumerate().map(move |(t, it)| {
                let name = vocab.item(it.item).unwrap_or_default().to_string();
                InteractionRecord {
                    learner_id: s.learner_id.clone(),
                    question_id: name.clone(),
                    concept_id: name,
                    correct: it.correct,
                    timestamp_ms: Some(t as i64),
                }
            })
        })
        .collect()
}

/// A contiguous piece of one learner's history.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub learner_id: String,
    /// Ordinal of this segment within the learner.
    pub segment: usize,
    /// Offset of the first interaction within the full sequence.
    pub start: usize,
    pub interactions: Vec<Interaction>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

/// Splits a sequence into consecutive non-overlapping segments of at most
/// `max_len` interactions.
pub fn window(seq: &LearnerSequence, max_len: usize) -> Vec<Segment> {
    assert!(max_len >= 2, "max_len must be at least 2");
    seq.interactions
        .chunks(max_len)
        .enumerate()
        .map(|(i, chunk)| Segment {
            learner_id: seq.learner_id.clone(),
            segment: i,
            start: i * max_len,
            interactions: chunk.to_vec(),
        })
        .collect()
}

pub fn window_all<'a, I>(seqs: I, max_len: usize) -> Vec<Segment>
where
    I: IntoIterator<Item = &'a LearnerSequence>,
{
    seqs.into_iter().flat_map(|s| window(s, max_len)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(learner: &str, q: &str, c: &str, correct: bool, ts: i64) -> InteractionRecord {
        InteractionRecord {
            learner_id: learner.into(),
            question_id: q.into(),
            concept_id: c.into(),
            correct,
            timestamp_ms: Some(ts),
        }
    }

    fn learner(id: &str, n: usize) -> Vec<InteractionRecord> {
        (0..n)
            .map(|i| rec(id, &format!("q{i}"), &format!("c{}", i % 2), i % 3 == 0, i as i64))
            .collect()
    }

    #[test]
    fn min_length_boundary() {
        let mut recs = learner("short", 4);
        recs.extend(learner("ok", 5));
        let (seqs, _) = preprocess(&recs, PreprocessOptions::default()).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].learner_id, "ok");
        assert_eq!(seqs[0].len(), 5);
    }

    #[test]
    fn all_dropped_is_error() {
        assert!(preprocess(&learner("a", 3), PreprocessOptions::default()).is_err());
    }

    #[test]
    fn shared_concept_shares_index() {
        let recs = vec![
            rec("a", "q1", "algebra", true, 0),
            rec("a", "q2", "algebra", false, 1),
            rec("a", "q3", "geometry", true, 2),
            rec("a", "q4", "algebra", true, 3),
            rec("a", "q5", "geometry", true, 4),
        ];
        let (seqs, vocab) = preprocess(&recs, PreprocessOptions::default()).unwrap();
        let items: Vec<usize> = seqs[0].interactions.iter().map(|i| i.item).collect();
        assert_eq!(items, vec![0, 0, 1, 0, 1]);
        assert_eq!(vocab.len(), 2);

        let opts = PreprocessOptions {
            concept_as_question: false,
            ..Default::default()
        };
        let (seqs, vocab) = preprocess(&recs, opts).unwrap();
        assert_eq!(vocab.len(), 5);
        assert_ne!(seqs[0].interactions[0].item, seqs[0].interactions[1].item);
    }

    #[test]
    fn timestamps_reorder_within_learner() {
        let recs = vec![
            rec("a", "q1", "c1", true, 30),
            rec("a", "q2", "c2", true, 10),
            rec("a", "q3", "c3", true, 20),
            rec("a", "q4", "c4", true, 40),
            rec("a", "q5", "c5", true, 50),
        ];
        let (seqs, vocab) = preprocess(&recs, PreprocessOptions::default()).unwrap();
        let names: Vec<&str> = seqs[0]
            .interactions
            .iter()
            .map(|i| vocab.item(i.item).unwrap())
            .collect();
        assert_eq!(names, vec!["c2", "c3", "c1", "c4", "c5"]);
    }

    #[test]
    fn window_lengths() {
        let seq = |n: usize| LearnerSequence {
            learner_id: "x".into(),
            interactions: vec![Interaction { item: 0, correct: true }; n],
        };
        let lens = |n, m| window(&seq(n), m).iter().map(Segment::len).collect::<Vec<_>>();
        assert_eq!(lens(250, 100), vec![100, 100, 50]);
        assert_eq!(lens(80, 100), vec![80]);
        assert_eq!(lens(300, 300), vec![300]);
        let segs = window(&seq(250), 100);
        assert_eq!(segs[2].start, 200);
    }

    #[test]
    fn vocab_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocab::from_items(vec!["b".into(), "a,comma".into(), "c".into()]).unwrap();
        let p = dir.path().join("vocab.csv");
        v.write_csv(&p).unwrap();
        assert_eq!(Vocab::read_csv(&p).unwrap(), v);
    }
}
