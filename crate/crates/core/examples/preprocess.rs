//! Raw records to learner sequences, fixed-length windows and k-fold splits.

use ktforget::data::{gen_synthetic, kfold_split, preprocess, window, DatasetStats, PreprocessOptions, SyntheticSpec};

fn main() -> ktforget::Result<()> {
    let data = gen_synthetic(&SyntheticSpec {
        learners: 60,
        length: 45,
        concepts: 12,
        seed: 1,
        ..Default::default()
    })?;
    let (seqs, vocab) = preprocess(&data.records, PreprocessOptions::default())?;
    let ids: Vec<String> = seqs.iter().map(|s| s.learner_id.clone()).collect();
    let split = kfold_split(&ids, 5, 0.1, 0)?;
    let stats = DatasetStats::compute(&seqs, &vocab, 20, &split);
    print!("{}", stats.summary());
    println!("segments of 20: {}", stats.segments);

    let first = &seqs[0];
    let windows = window(first, 20);
    let lens: Vec<usize> = windows.iter().map(|w| w.len()).collect();
    println!(
        "learner {} ({} interactions) -> windows {lens:?}",
        first.learner_id,
        first.len()
    );

    for (k, fold) in split.folds.iter().enumerate() {
        println!(
            "fold {k}: train {} val {} test {}",
            fold.train.len(),
            fold.val.len(),
            fold.test.len()
        );
    }
    Ok(())
}
