use super::preprocess::{Interaction, Segment};
use crate::error::{KtError, Result};

/// Right-padded mini-batch of segments, row-major `[B × L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub len: usize,
    pub item_ids: Vec<usize>,
    pub responses: Vec<u8>,
    pub valid_mask: Vec<bool>,
    /// `(learner_id, segment ordinal, start offset)` of each row.
    pub origins: Vec<(String, usize, usize)>,
}

impl Batch {
    /// Pads every segment to `pad_to` with item 0 / response 0 and marks the
    /// padding invalid.
    pub fn from_segments(segments: &[&Segment], pad_to: usize) -> Result<Self> {
        if segments.is_empty() {
            return Err(KtError::Empty("Batch::from_segments"));
        }
        let b = segments.len();
        let mut item_ids = vec![0; b * pad_to];
        let mut responses = vec![0; b * pad_to];
        let mut valid_mask = vec![false; b * pad_to];
        let mut origins = Vec::with_capacity(b);
        for (r, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(KtError::InvalidArgument(format!(
                    "segment {} of {} is empty",
                    seg.segment, seg.learner_id
                )));
            }
            if seg.len() > pad_to {
                return Err(KtError::OutOfRange {
                    what: "segment length vs batch length",
                    index: seg.len(),
                    size: pad_to,
                });
            }
            for (t, it) in seg.interactions.iter().enumerate() {
                item_ids[r * pad_to + t] = it.item;
                responses[r * pad_to + t] = u8::from(it.correct);
                valid_mask[r * pad_to + t] = true;
            }
            origins.push((seg.learner_id.clone(), seg.segment, seg.start));
        }
        Ok(Batch {
            batch_size: b,
            len: pad_to,
            item_ids,
            responses,
            valid_mask,
            origins,
        })
    }

    pub fn n_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    pub fn row_len(&self, row: usize) -> usize {
        self.valid_mask[row * self.len..(row + 1) * self.len]
            .iter()
            .filter(|&&v| v)
            .count()
    }

    /// Responses as f64 labels.
    pub fn labels(&self) -> Vec<f64> {
        self.responses.iter().map(|&r| f64::from(r)).collect()
    }

    /// Recovers the unpadded interactions of every row.
    pub fn unpad(&self) -> Vec<Vec<Interaction>> {
        (0..self.batch_size)
            .map(|r| {
                (0..self.len)
                    .filter(|&t| self.valid_mask[r * self.len + t])
                    .map(|t| Interaction {
                        item: self.item_ids[r * self.len + t],
                        correct: self.responses[r * self.len + t] == 1,
                    })
                    .collect()
            })
            .collect()
    }

    /// A single-row batch holding row `row` of this batch.
    pub fn row(&self, row: usize) -> Result<Batch> {
        if row >= self.batch_size {
            return Err(KtError::OutOfRange {
                what: "batch row",
                index: row,
                size: self.batch_size,
            });
        }
        let s = row * self.len..(row + 1) * self.len;
        Ok(Batch {
            batch_size: 1,
            len: self.len,
            item_ids: self.item_ids[s.clone()].to_vec(),
            responses: self.responses[s.clone()].to_vec(),
            valid_mask: self.valid_mask[s].to_vec(),
            origins: vec![self.origins[row].clone()],
        })
    }
}
