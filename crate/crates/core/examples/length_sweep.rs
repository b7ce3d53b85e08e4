//! Fixed-history evaluation: each prediction sees exactly `n` earlier
//! interactions.

use ktforget::bias::{BiasConfig, BiasKind};
use ktforget::data::{gen_synthetic, kfold_split, preprocess, PreprocessOptions, SyntheticSpec};
use ktforget::model::ModelConfig;
use ktforget::train_eval::{run_fold, sweep_length, FoldData, TrainConfig, SWEEP_CSV_HEADER};

fn main() -> ktforget::Result<()> {
    let data = gen_synthetic(&SyntheticSpec {
        learners: 60,
        length: 70,
        concepts: 15,
        seed: 11,
        ..Default::default()
    })?;
    let (seqs, vocab) = preprocess(&data.records, PreprocessOptions::default())?;
    let ids: Vec<String> = seqs.iter().map(|s| s.learner_id.clone()).collect();
    let split = kfold_split(&ids, 5, 0.1, 0)?;
    let fold = split.fold(0)?;
    let model_cfg = ModelConfig {
        d_model: 16,
        num_heads: 2,
        num_blocks: 1,
        max_len: 60,
        vocab_size: vocab.len(),
        bias: BiasConfig {
            kind: BiasKind::Folibi,
            ..Default::default()
        },
        ..Default::default()
    };
    let train_cfg = TrainConfig {
        batch_size: 16,
        max_epochs: 5,
        patience: 2,
        ..Default::default()
    };
    let run = run_fold(&model_cfg, &train_cfg, &FoldData::new(&seqs, fold, 60), |_| {})?;

    let test: Vec<_> = seqs
        .iter()
        .filter(|s| fold.test.contains(&s.learner_id))
        .cloned()
        .collect();
    let result = sweep_length(&run.outcome.best, &test, &[5, 10, 20, 40, 60], 64)?;
    println!("{}", SWEEP_CSV_HEADER.join(","));
    for row in result.csv_rows() {
        println!("{}", row.join(","));
    }
    Ok(())
}
