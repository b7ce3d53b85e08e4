use std::rc::Rc;

use crate::bias::BiasOutput;
use crate::error::{KtError, Result};
use crate::numerics::{GroupMap, Mask, Tape, Tensor, Var};

/// Bias terms for one call of [`biased_attention`] on `[G, L, L]` scores.
#[derive(Clone, Debug)]
pub enum AttnBias {
    None,
    /// Added to the logits before scaling; `[K, L, L]` broadcast with `map`.
    Beta {
        beta: Var,
        map: GroupMap,
    },
    /// Logits multiplied by `exp(−softplus(raw_h) · dist)`, `dist` `[G, L, L]`.
    Mono {
        raw: Var,
        dist: Rc<[f64]>,
    },
    /// Mixed into the weights as `(α + γ) / 2`; `[K, L, L]` broadcast with `map`.
    Gamma {
        gamma: Var,
        map: GroupMap,
    },
}

impl AttnBias {
    /// Records a [`BiasOutput`] as constants; its `[H, t, t]` terms cycle over
    /// the batch axis of `[B·H, t, t]` scores.
    pub fn from_output(tape: &mut Tape, out: &BiasOutput) -> Result<Self> {
        let shape = [out.heads, out.t, out.t];
        match (&out.beta, &out.gamma) {
            (None, None) => Ok(AttnBias::None),
            (Some(b), None) => Ok(AttnBias::Beta {
                beta: tape.constant(Tensor::new(shape, b.clone())?),
                map: GroupMap::Cycle,
            }),
            (None, Some(g)) => Ok(AttnBias::Gamma {
                gamma: tape.constant(Tensor::new(shape, g.clone())?),
                map: GroupMap::Cycle,
            }),
            (Some(_), Some(_)) => Err(KtError::InvalidArgument(
                "a block carries either beta or gamma, not both".into(),
            )),
        }
    }
}

/// `softmax((q·kᵀ + β)/√d_h)` over the valid keys of `mask`, optionally mixed
/// with `γ`, then applied to `v`. `q`, `k`, `v` are `[G, L, d_h]`.
///
/// Rows without any valid key produce zero weights and a zero context.
pub fn biased_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &Mask, bias: &AttnBias) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if sq.len() != 3 || sq != sk || sk != sv {
        return Err(KtError::shape("biased_attention", sq, sk));
    }
    let (g, l, dh) = (sq[0], sq[1], sq[2]);
    if mask.shape() != [g, l, l] {
        return Err(KtError::shape("biased_attention mask", mask.shape(), &[g, l, l]));
    }
    let inv = 1.0 / (dh as f64).sqrt();
    let mut logits = tape.bmm(q, k, true, inv)?;
    match bias {
        AttnBias::Beta { beta, map } => {
            let scaled = tape.scale(*beta, inv)?;
            logits = tape.add_grouped(logits, scaled, *map)?;
        }
        AttnBias::Mono { raw, dist } => {
            logits = tape.mono_decay(logits, *raw, dist.clone())?;
        }
        AttnBias::None | AttnBias::Gamma { .. } => {}
    }
    let mut weights = tape.masked_softmax_allow_empty(logits, mask)?;
    if let AttnBias::Gamma { gamma, map } = bias {
        // both terms are normalized over the same keys, so their mean is too
        let mixed = tape.add_grouped(weights, *gamma, *map)?;
        weights = tape.scale(mixed, 0.5)?;
    }
    let ctx = tape.bmm(weights, v, false, 1.0)?;
    Ok((ctx, weights))
}

/// Unbiased attention distribution of `scores` over `mask`, used for the
/// effective distances of monotonic attention.
pub(crate) fn plain_weights(scores: &[f64], mask: &[bool], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    for ((row, valid), o) in scores.chunks(len).zip(mask.chunks(len)).zip(out.chunks_mut(len)) {
        crate::numerics::kernels::masked_softmax_row(row, valid, o);
    }
    out
}
