//! Attention of the retriever's last block for one learner: first and last
//! head of an (untrained) FoLiBi model, next to the slope schedule.

use ktforget::bias::{folibi_slopes, BiasConfig, BiasKind};
use ktforget::data::{gen_synthetic, preprocess, window, Batch, PreprocessOptions, SyntheticSpec};
use ktforget::model::{dump_attention, init_params, ModelConfig, Stack};

fn main() -> ktforget::Result<()> {
    let data = gen_synthetic(&SyntheticSpec {
        learners: 3,
        length: 30,
        concepts: 10,
        ..Default::default()
    })?;
    let (seqs, vocab) = preprocess(
        &data.records,
        PreprocessOptions {
            min_len: 1,
            ..Default::default()
        },
    )?;
    let cfg = ModelConfig {
        d_model: 32,
        num_heads: 8,
        num_blocks: 2,
        max_len: 30,
        vocab_size: vocab.len(),
        bias: BiasConfig {
            kind: BiasKind::Folibi,
            ..Default::default()
        },
        ..Default::default()
    };
    println!("slopes: {:?}", folibi_slopes(cfg.num_heads));
    let model = init_params(&cfg, 0)?;
    let seg = &window(&seqs[0], cfg.max_len)[0];
    let batch = Batch::from_segments(&[seg], seg.len())?;
    let trace = dump_attention(&model, &batch, Stack::Retriever, cfg.num_blocks - 1, 8)?;
    for h in [0, cfg.num_heads - 1] {
        println!("head {}:", h + 1);
        for i in 0..trace.n {
            let row: Vec<String> = trace.heads[h][i * trace.n..(i + 1) * trace.n]
                .iter()
                .map(|w| format!("{w:.3}"))
                .collect();
            println!("  {}", row.join(" "));
        }
    }
    Ok(())
}
