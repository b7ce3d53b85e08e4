//! Backprop against central differences on a toy model, for each bias kind.

use ktforget::bias::{BiasConfig, BiasKind};
use ktforget::data::{Batch, Interaction, Segment};
use ktforget::model::{gradient_check, init_params, ModelConfig};

fn main() -> ktforget::Result<()> {
    let seg = |id: &str, items: &[usize], correct: &[u8]| Segment {
        learner_id: id.into(),
        segment: 0,
        start: 0,
        interactions: items
            .iter()
            .zip(correct)
            .map(|(&item, &c)| Interaction { item, correct: c == 1 })
            .collect(),
    };
    let a = seg("a", &[0, 3, 1, 3, 2, 5], &[1, 0, 1, 1, 0, 1]);
    let b = seg("b", &[4, 4, 2, 0, 1, 1], &[0, 0, 1, 0, 1, 1]);
    let batch = Batch::from_segments(&[&a, &b], 6)?;

    for kind in BiasKind::ALL {
        let cfg = ModelConfig {
            d_model: 8,
            num_heads: 2,
            num_blocks: 1,
            max_len: 6,
            vocab_size: 6,
            bias: BiasConfig {
                kind,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = init_params(&cfg, 1)?;
        let r = gradient_check(&model, &batch, 50, 1e-5, 2)?;
        println!(
            "{:<7} max relative error {:.2e} over {} coordinates (worst: {}[{}])",
            kind.as_str(),
            r.max_rel_error,
            r.coords,
            r.worst.0,
            r.worst.1
        );
    }
    Ok(())
}
