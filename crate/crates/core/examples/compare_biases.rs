//! Train every bias kind on the same fold and print one row per kind.
//!
//! cargo run --release --example compare_biases -- [epochs]

use ktforget::bias::{BiasConfig, BiasKind};
use ktforget::data::{gen_synthetic, kfold_split, preprocess, PreprocessOptions, SyntheticSpec};
use ktforget::model::{param_count, ModelConfig};
use ktforget::train_eval::{run_fold, FoldData, TrainConfig};

fn main() -> ktforget::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(8);
    let data = gen_synthetic(&SyntheticSpec {
        learners: 100,
        length: 50,
        concepts: 20,
        seed: 3,
        ..Default::default()
    })?;
    let (seqs, vocab) = preprocess(&data.records, PreprocessOptions::default())?;
    let ids: Vec<String> = seqs.iter().map(|s| s.learner_id.clone()).collect();
    let split = kfold_split(&ids, 5, 0.1, 0)?;
    let fold = FoldData::new(&seqs, split.fold(0)?, 50);

    println!(
        "{:<8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "bias", "params", "auc", "acc", "rmse", "w_acc"
    );
    for kind in BiasKind::ALL {
        let model_cfg = ModelConfig {
            d_model: 16,
            num_heads: 4,
            num_blocks: 1,
            max_len: 50,
            vocab_size: vocab.len(),
            bias: BiasConfig {
                kind,
                ..Default::default()
            },
            ..Default::default()
        };
        let train_cfg = TrainConfig {
            batch_size: 16,
            max_epochs: epochs,
            patience: 3,
            ..Default::default()
        };
        let t = run_fold(&model_cfg, &train_cfg, &fold, |_| {})?.test;
        println!(
            "{:<8} {:>8} {:>8.4} {:>8.4} {:>8.2} {:>8.4}",
            kind.as_str(),
            param_count(&model_cfg),
            t.auc,
            t.acc,
            t.rmse_x100(),
            t.w_acc
        );
    }
    Ok(())
}
