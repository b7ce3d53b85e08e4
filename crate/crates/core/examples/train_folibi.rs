//! Train a small FoLiBi model on synthetic data and report test metrics.
//!
//! cargo run --release --example train_folibi

use ktforget::bias::{BiasConfig, BiasKind};
use ktforget::data::{gen_synthetic, kfold_split, preprocess, PreprocessOptions, SyntheticSpec};
use ktforget::model::{save_checkpoint, ModelConfig};
use ktforget::train_eval::{run_fold, FoldData, TrainConfig};

fn main() -> ktforget::Result<()> {
    let data = gen_synthetic(&SyntheticSpec {
        learners: 120,
        length: 60,
        concepts: 20,
        seed: 7,
        ..Default::default()
    })?;
    let (seqs, vocab) = preprocess(&data.records, PreprocessOptions::default())?;
    let ids: Vec<String> = seqs.iter().map(|s| s.learner_id.clone()).collect();
    let split = kfold_split(&ids, 5, 0.1, 0)?;
    let fold = FoldData::new(&seqs, split.fold(0)?, 30);

    let model_cfg = ModelConfig {
        d_model: 32,
        num_heads: 4,
        num_blocks: 1,
        max_len: 30,
        vocab_size: vocab.len(),
        bias: BiasConfig {
            kind: BiasKind::Folibi,
            ..Default::default()
        },
        ..Default::default()
    };
    let train_cfg = TrainConfig {
        batch_size: 32,
        max_epochs: 15,
        patience: 3,
        ..Default::default()
    };
    let run = run_fold(&model_cfg, &train_cfg, &fold, |e| {
        println!(
            "epoch {:>2}  loss {:.4}  val auc {:.4}",
            e.epoch,
            e.train_loss,
            e.val_auc.unwrap_or(f64::NAN)
        );
    })?;
    let t = &run.test;
    println!(
        "test: auc {:.4} acc {:.4} rmse {:.2} (x100) w_acc {:.4} over {} predictions",
        t.auc,
        t.acc,
        t.rmse_x100(),
        t.w_acc,
        t.n_evaluated
    );
    let path = std::env::temp_dir().join("ktforget_folibi.ckpt");
    save_checkpoint(&path, &run.outcome.best)?;
    println!("best epoch {} saved to {}", run.outcome.best_epoch, path.display());
    Ok(())
}
