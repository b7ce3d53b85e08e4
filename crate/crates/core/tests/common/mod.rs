#![allow(dead_code)]

use ktforget::bias::{BiasConfig, BiasKind};
use ktforget::data::{Batch, Interaction, Segment};
use ktforget::model::{init_params, KtModel, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn toy_config(kind: BiasKind) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        num_heads: 2,
        num_blocks: 1,
        max_len: 12,
        vocab_size: 6,
        bias: BiasConfig {
            kind,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// A model whose weights are large enough that every nonlinearity is
/// exercised (the production init is near-linear).
pub fn spread_model(cfg: &ModelConfig, seed: u64) -> KtModel {
    let mut m = init_params(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let dist = Normal::new(0.0, 0.4).unwrap();
    for t in m.params_mut() {
        for v in t.data_mut() {
            *v += dist.sample(&mut rng);
        }
    }
    m
}

pub fn segment(id: &str, items: &[usize], correct: &[bool]) -> Segment {
    Segment {
        learner_id: id.into(),
        segment: 0,
        start: 0,
        interactions: items
            .iter()
            .zip(correct)
            .map(|(&item, &correct)| Interaction { item, correct })
            .collect(),
    }
}

pub fn random_segment(rng: &mut ChaCha8Rng, id: &str, len: usize, vocab: usize) -> Segment {
    let items: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
    let correct: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.5)).collect();
    segment(id, &items, &correct)
}

pub fn random_batch(seed: u64, rows: usize, len: usize, vocab: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segs: Vec<Segment> = (0..rows)
        .map(|r| random_segment(&mut rng, &format!("l{r}"), len, vocab))
        .collect();
    let refs: Vec<&Segment> = segs.iter().collect();
    Batch::from_segments(&refs, len).unwrap()
}

pub fn bits(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}
