use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{biased_attention, plain_weights, AttnBias};
use super::{KtModel, Stack, LN_EPS};
use crate::bias::{effective_distances, folibi_beta, folibi_slopes, BiasKind};
use crate::data::Batch;
use crate::error::{KtError, Result};
use crate::numerics::kernels::gemm_nt;
use crate::numerics::{GroupMap, Mask, Tape, Tensor, Var};

/// Knobs for a single forward pass. The default is plain inference.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Frozen effective distances for monotonic blocks, indexed like
    /// [`ForwardOutput::mono_distances`]. Used by gradient checks so that
    /// finite differences see the same constants as the backward pass.
    pub mono_distances: Option<&'a [Option<Rc<[f64]>>]>,
    /// Replaces the fixed linear-bias slopes.
    pub folibi_slopes: Option<Vec<f64>>,
    /// Enables dropout (when the config rate is positive).
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockWeights {
    pub stack: Stack,
    pub block: usize,
    /// `[B·H, L, L]` attention weights.
    pub weights: Var,
}

pub struct ForwardOutput {
    pub tape: Tape,
    /// `[B·L, 1]` probabilities of a correct answer.
    pub preds: Var,
    /// One tape handle per model parameter, in [`KtModel::names`] order.
    pub params: Vec<Var>,
    pub attention: Vec<BlockWeights>,
    /// Effective distances used by each attention block (`None` unless the
    /// block is monotonic), in stack order question, interaction, retriever.
    pub mono_distances: Vec<Option<Rc<[f64]>>>,
}

impl ForwardOutput {
    pub fn predictions(&self) -> &[f64] {
        self.tape.value(self.preds).data()
    }

    pub fn block(&self, stack: Stack, block: usize) -> Option<BlockWeights> {
        self.attention
            .iter()
            .copied()
            .find(|b| b.stack == stack && b.block == block)
    }
}

struct Ctx<'m, 'o> {
    tape: Tape,
    model: &'m KtModel,
    vars: Vec<Var>,
    batch: usize,
    len: usize,
    opts: ForwardOptions<'o>,
    rc_sim: Option<Var>,
    folibi: Option<Var>,
    attention: Vec<BlockWeights>,
    distances: Vec<Option<Rc<[f64]>>>,
}

impl Ctx<'_, '_> {
    fn p(&self, name: &str) -> Var {
        self.vars[self.model.position(name)]
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (self.p(w), self.p(b));
        let y = self.tape.matmul(x, w)?;
        self.tape.add_bias(y, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let (g, b) = (self.p(&format!("{prefix}.gamma")), self.p(&format!("{prefix}.beta")));
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.model.config.dropout;
        let Some(rng) = self.opts.dropout_rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.tape.shape(x).to_vec();
        let n = self.tape.value(x).numel();
        let m: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let m = self.tape.constant(Tensor::new(shape, m)?);
        self.tape.mul(x, m)
    }

    fn block_bias(
        &mut self,
        stack: Stack,
        block: usize,
        q: Var,
        k: Var,
        mask: &Mask,
        rc_mask: &Mask,
    ) -> Result<AttnBias> {
        let cfg = &self.model.config;
        if !cfg.block_biased(stack) {
            self.distances.push(None);
            return Ok(AttnBias::None);
        }
        let prefix = format!("{}.{block}", stack.as_str());
        let slot = self.distances.len();
        match cfg.bias.kind {
            BiasKind::None | BiasKind::Pe => {
                self.distances.push(None);
                Ok(AttnBias::None)
            }
            BiasKind::Folibi => {
                self.distances.push(None);
                let beta = match self.folibi {
                    Some(v) => v,
                    None => {
                        let slopes = self
                            .opts
                            .folibi_slopes
                            .clone()
                            .unwrap_or_else(|| folibi_slopes(cfg.num_heads));
                        let t = Tensor::new([slopes.len(), self.len, self.len], folibi_beta(self.len, &slopes))?;
                        let v = self.tape.constant(t);
                        self.folibi = Some(v);
                        v
                    }
                };
                Ok(AttnBias::Beta {
                    beta,
                    map: GroupMap::Cycle,
                })
            }
            BiasKind::Mono => {
                let raw = self.p(&format!("{prefix}.mono.theta_raw"));
                let frozen = self.opts.mono_distances.and_then(|d| d.get(slot).cloned().flatten());
                let dist = match frozen {
                    Some(d) => d,
                    None => self.distances_from(q, k, mask).into(),
                };
                self.distances.push(Some(dist.clone()));
                Ok(AttnBias::Mono { raw, dist })
            }
            BiasKind::Rc => {
                self.distances.push(None);
                let sim = self.rc_sim.expect("similarity recorded for RC models");
                let raw = self.p(&format!("{prefix}.rc.s_raw"));
                let logits = self.tape.rc_recency(sim, raw)?;
                let gamma = self.tape.masked_softmax_allow_empty(logits, rc_mask)?;
                Ok(AttnBias::Gamma {
                    gamma,
                    map: GroupMap::Repeat,
                })
            }
        }
    }

    /// Effective distances from the unbiased scaled scores of `q`, `k`; they
    /// enter the graph as constants.
    fn distances_from(&self, q: Var, k: Var, mask: &Mask) -> Vec<f64> {
        let s = self.tape.shape(q);
        let (g, l, dh) = (s[0], s[1], s[2]);
        let (qd, kd) = (self.tape.value(q).data(), self.tape.value(k).data());
        let mut scores = vec![0.0; g * l * l];
        let inv = 1.0 / (dh as f64).sqrt();
        for gi in 0..g {
            gemm_nt(
                &qd[gi * l * dh..(gi + 1) * l * dh],
                &kd[gi * l * dh..(gi + 1) * l * dh],
                &mut scores[gi * l * l..(gi + 1) * l * l],
                l,
                dh,
                l,
                inv,
            );
        }
        let w = plain_weights(&scores, mask.data(), l);
        effective_distances(&w, mask.data(), l)
    }

    /// One pre-norm residual block. Encoders attend over their own stream;
    /// the retriever queries with its stream against fixed keys and values.
    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        stack: Stack,
        block: usize,
        stream: Var,
        kv: Option<(Var, Var)>,
        mask: &Mask,
        rc_mask: &Mask,
    ) -> Result<Var> {
        let pre = format!("{}.{block}", stack.as_str());
        let heads = self.model.config.num_heads;
        let (b, l) = (self.batch, self.len);
        let n1 = self.norm(stream, &format!("{pre}.ln1"))?;
        let (ksrc, vsrc) = kv.unwrap_or((n1, n1));
        let q = self.linear(n1, &format!("{pre}.attn.wq"), &format!("{pre}.attn.bq"))?;
        let k = self.linear(ksrc, &format!("{pre}.attn.wk"), &format!("{pre}.attn.bk"))?;
        let v = self.linear(vsrc, &format!("{pre}.attn.wv"), &format!("{pre}.attn.bv"))?;
        let q = self.tape.split_heads(q, b, l, heads)?;
        let k = self.tape.split_heads(k, b, l, heads)?;
        let v = self.tape.split_heads(v, b, l, heads)?;
        let bias = self.block_bias(stack, block, q, k, mask, rc_mask)?;
        let (ctx, weights) = biased_attention(&mut self.tape, q, k, v, mask, &bias)?;
        self.attention.push(BlockWeights { stack, block, weights });
        let ctx = self.tape.merge_heads(ctx, b, heads)?;
        let a = self.linear(ctx, &format!("{pre}.attn.wo"), &format!("{pre}.attn.bo"))?;
        let a = self.dropout(a)?;
        let stream = self.tape.add(stream, a)?;

        let n2 = self.norm(stream, &format!("{pre}.ln2"))?;
        let f = self.linear(n2, &format!("{pre}.ffn.w1"), &format!("{pre}.ffn.b1"))?;
        let f = self.tape.relu(f)?;
        let f = self.linear(f, &format!("{pre}.ffn.w2"), &format!("{pre}.ffn.b2"))?;
        let f = self.dropout(f)?;
        self.tape.add(stream, f)
    }

    fn stack(&mut self, stack: Stack, input: Var, kv: Option<(Var, Var)>, mask: &Mask, rc_mask: &Mask) -> Result<Var> {
        let mut s = input;
        for blk in 0..self.model.config.num_blocks {
            s = self.block(stack, blk, s, kv, mask, rc_mask)?;
        }
        self.norm(s, &format!("{}.ln_f", stack.as_str()))
    }
}

/// Causal mask over `[B·reps, L, L]`, also hiding padded keys.
fn causal_mask(batch: &Batch, reps: usize, strict: bool) -> Result<Mask> {
    let l = batch.len;
    let mut data = Vec::with_capacity(batch.batch_size * reps * l * l);
    for b in 0..batch.batch_size {
        let valid = &batch.valid_mask[b * l..(b + 1) * l];
        for _ in 0..reps {
            for i in 0..l {
                for (j, &ok) in valid.iter().enumerate() {
                    data.push(ok && if strict { j < i } else { j <= i });
                }
            }
        }
    }
    Mask::new([batch.batch_size * reps, l, l], data)
}

/// Runs the network on `batch`, recording every op on a fresh tape.
pub fn forward<'o>(model: &KtModel, batch: &Batch, opts: ForwardOptions<'o>) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let (bsz, len) = (batch.batch_size, batch.len);
    if len > cfg.max_tokens() {
        return Err(KtError::OutOfRange {
            what: "sequence length vs max_len + 1",
            index: len,
            size: cfg.max_tokens(),
        });
    }
    if batch.item_ids.len() != bsz * len || batch.valid_mask.len() != bsz * len || batch.responses.len() != bsz * len {
        return Err(KtError::shape("forward batch", &[batch.item_ids.len()], &[bsz, len]));
    }
    if let Some(&bad) = batch.item_ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(KtError::OutOfRange {
            what: "item index",
            index: bad,
            size: cfg.vocab_size,
        });
    }
    let mut tape = Tape::new();
    let vars = model.params().iter().map(|p| tape.leaf(p.clone())).collect();
    let mut cx = Ctx {
        tape,
        model,
        vars,
        batch: bsz,
        len,
        opts,
        rc_sim: None,
        folibi: None,
        attention: Vec::new(),
        distances: Vec::new(),
    };

    let d = cfg.d_model;
    let q_table = cx.p("emb.question");
    let r_table = cx.p("emb.response");
    let e = cx.tape.gather_rows(q_table, &batch.item_ids)?;
    let resp: Vec<usize> = batch.responses.iter().map(|&r| r as usize).collect();
    let r = cx.tape.gather_rows(r_table, &resp)?;
    let mut x = cx.tape.add(e, r)?;
    let mut e_in = e;
    if cfg.bias.kind == BiasKind::Pe {
        let table = cx.p("emb.position");
        let rows = cx.tape.shape(table)[0];
        if len > rows {
            return Err(KtError::OutOfRange {
                what: "position",
                index: len - 1,
                size: rows,
            });
        }
        let pos: Vec<usize> = (0..bsz).flat_map(|_| 0..len).collect();
        let p = cx.tape.gather_rows(table, &pos)?;
        e_in = cx.tape.add(e, p)?;
        x = cx.tape.add(x, p)?;
    }
    if cfg.bias.kind == BiasKind::Rc {
        let e3 = cx.tape.reshape(e, &[bsz, len, d])?;
        cx.rc_sim = Some(cx.tape.cosine_sim(e3)?);
    }

    let heads = cfg.num_heads;
    let incl = causal_mask(batch, heads, false)?;
    let strict = causal_mask(batch, heads, true)?;
    let (incl_rc, strict_rc) = if cfg.bias.kind == BiasKind::Rc {
        (causal_mask(batch, 1, false)?, causal_mask(batch, 1, true)?)
    } else {
        (Mask::all([0]), Mask::all([0]))
    };

    let h = cx.stack(Stack::Question, e_in, None, &incl, &incl_rc)?;
    let y = cx.stack(Stack::Interaction, x, None, &incl, &incl_rc)?;
    let z = cx.stack(Stack::Retriever, h, Some((h, y)), &strict, &strict_rc)?;

    // the first position has no history: its knowledge state is zero
    let hist: Vec<f64> = (0..bsz * len)
        .flat_map(|i| std::iter::repeat_n(if i % len == 0 { 0.0 } else { 1.0 }, d))
        .collect();
    let hist = cx.tape.constant(Tensor::new([bsz * len, d], hist)?);
    let o = cx.tape.mul(z, hist)?;
    let hin = cx.tape.concat_cols(o, h)?;
    let a = cx.linear(hin, "head.w1", "head.b1")?;
    let a = cx.tape.relu(a)?;
    let logit = cx.linear(a, "head.w2", "head.b2")?;
    let preds = cx.tape.sigmoid(logit)?;

    Ok(ForwardOutput {
        tape: cx.tape,
        preds,
        params: cx.vars,
        attention: cx.attention,
        mono_distances: cx.distances,
    })
}

/// Attention weights of one block for a single learner row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub stack: Stack,
    pub block: usize,
    pub n: usize,
    /// One row-major `n × n` matrix per head.
    pub heads: Vec<Vec<f64>>,
}

/// Weights of `block` in `stack` for row 0 of `batch`, truncated to the
/// first `n` positions (or the row's length if shorter).
pub fn dump_attention(model: &KtModel, batch: &Batch, stack: Stack, block: usize, n: usize) -> Result<AttentionTrace> {
    if block >= model.config.num_blocks {
        return Err(KtError::OutOfRange {
            what: "attention block",
            index: block,
            size: model.config.num_blocks,
        });
    }
    let row = batch.row(0)?;
    let out = forward(model, &row, ForwardOptions::default())?;
    let bw = out.block(stack, block).expect("every block records its weights");
    let w = out.tape.value(bw.weights).data();
    let l = row.len;
    let n = n.min(row.row_len(0));
    let heads = (0..model.config.num_heads)
        .map(|h| {
            (0..n)
                .flat_map(|i| w[(h * l + i) * l..(h * l + i) * l + n].iter().copied())
                .collect()
        })
        .collect();
    Ok(AttentionTrace { stack, block, n, heads })
}
