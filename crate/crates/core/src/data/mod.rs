//! Interaction logs: CSV ingestion, preprocessing, windowing, fold splits,
//! padded batches, and the synthetic forgetting-curve generator.

mod batch;
mod preprocess;
mod processed;
mod records;
mod split;
pub mod synthetic;

pub use batch::Batch;
pub use preprocess::{
    preprocess, sequences_to_records, window, window_all, Interaction, LearnerSequence, PreprocessOptions, Segment,
    Vocab, DEFAULT_MIN_LEN,
};
pub use processed::{DatasetStats, ProcessedData, SEQUENCES_HEADER};
pub use records::{load_csv, read_records, write_csv, InteractionRecord, CSV_HEADER};
pub use split::{kfold_split, Fold, FoldSplit};
pub use synthetic::{gen_synthetic, SyntheticData, SyntheticSpec};
