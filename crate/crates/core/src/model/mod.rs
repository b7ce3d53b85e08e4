//! Attentive knowledge-tracing network: a question encoder, an interaction
//! encoder and a knowledge retriever, followed by a two-layer prediction head.

mod attention;
mod checkpoint;
mod forward;
mod gradcheck;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use attention::{biased_attention, AttnBias};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{dump_attention, forward, AttentionTrace, BlockWeights, ForwardOptions, ForwardOutput};
pub use gradcheck::{batch_loss, gradient_check, GradCheckReport};

use crate::bias::{BiasConfig, BiasKind, BiasScope};
use crate::error::{KtError, Result};
use crate::numerics::{softplus_inv, Tensor};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_heads: usize,
    /// Attention blocks per stack.
    pub num_blocks: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub bias: BiasConfig,
    pub ffn_mult: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            num_heads: 8,
            num_blocks: 2,
            max_len: 100,
            vocab_size: 0,
            bias: BiasConfig::default(),
            ffn_mult: 4,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KtError::InvalidArgument(m));
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.num_blocks == 0 || self.ffn_mult == 0 {
            return bad("num_blocks and ffn_mult must be positive".into());
        }
        if self.max_len < 1 {
            return bad("max_len must be positive".into());
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Longest token sequence a forward pass accepts: a full history of
    /// `max_len` interactions plus the target.
    pub fn max_tokens(&self) -> usize {
        self.max_len + 1
    }

    /// Whether the relative bias is active in a block of `stack`.
    pub fn block_biased(&self, stack: Stack) -> bool {
        match self.bias.scope {
            BiasScope::AllBlocks => true,
            BiasScope::RetrieverOnly => stack == Stack::Retriever,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stack {
    Question,
    Interaction,
    Retriever,
}

impl Stack {
    pub const ALL: [Stack; 3] = [Stack::Question, Stack::Interaction, Stack::Retriever];

    pub fn as_str(self) -> &'static str {
        match self {
            Stack::Question => "question",
            Stack::Interaction => "interaction",
            Stack::Retriever => "retriever",
        }
    }
}

impl std::str::FromStr for Stack {
    type Err = KtError;

    fn from_str(s: &str) -> Result<Self> {
        Stack::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            KtError::InvalidArgument(format!("unknown stack `{s}` (expected question|interaction|retriever)"))
        })
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    Zeros,
    Ones,
    Const(f64),
}

/// Named parameter tensors in a fixed creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct KtModel {
    pub config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let f = cfg.d_model * cfg.ffn_mult;
    let mut out: Vec<(String, Vec<usize>, Init)> = vec![
        ("emb.question".into(), vec![cfg.vocab_size, d], Init::Normal),
        ("emb.response".into(), vec![2, d], Init::Normal),
    ];
    if cfg.bias.kind == BiasKind::Pe {
        out.push(("emb.position".into(), vec![cfg.max_tokens(), d], Init::Normal));
    }
    let raw_one = softplus_inv(1.0);
    for stack in Stack::ALL {
        for b in 0..cfg.num_blocks {
            let p = |s: &str| format!("{}.{b}.{s}", stack.as_str());
            out.push((p("ln1.gamma"), vec![d], Init::Ones));
            out.push((p("ln1.beta"), vec![d], Init::Zeros));
            for w in ["q", "k", "v", "o"] {
                out.push((p(&format!("attn.w{w}")), vec![d, d], Init::Normal));
                out.push((p(&format!("attn.b{w}")), vec![d], Init::Zeros));
            }
            if cfg.block_biased(stack) {
                match cfg.bias.kind {
                    BiasKind::Mono => out.push((p("mono.theta_raw"), vec![cfg.num_heads], Init::Const(raw_one))),
                    BiasKind::Rc => out.push((p("rc.s_raw"), vec![1], Init::Const(raw_one))),
                    _ => {}
                }
            }
            out.push((p("ln2.gamma"), vec![d], Init::Ones));
            out.push((p("ln2.beta"), vec![d], Init::Zeros));
            out.push((p("ffn.w1"), vec![d, f], Init::Normal));
            out.push((p("ffn.b1"), vec![f], Init::Zeros));
            out.push((p("ffn.w2"), vec![f, d], Init::Normal));
            out.push((p("ffn.b2"), vec![d], Init::Zeros));
        }
        out.push((format!("{}.ln_f.gamma", stack.as_str()), vec![d], Init::Ones));
        out.push((format!("{}.ln_f.beta", stack.as_str()), vec![d], Init::Zeros));
    }
    out.push(("head.w1".into(), vec![2 * d, d], Init::Normal));
    out.push(("head.b1".into(), vec![d], Init::Zeros));
    out.push(("head.w2".into(), vec![d, 1], Init::Normal));
    out.push(("head.b2".into(), vec![1], Init::Zeros));
    out
}

/// Draws from `N(0, std²)` truncated to `±2·std` by rejection.
fn truncated_normal(rng: &mut ChaCha8Rng, dist: &Normal<f64>, std: f64) -> f64 {
    loop {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Embeddings and linear weights `~ N(0, 0.02²)` truncated at ±2σ, biases and
/// layer-norm offsets 0, layer-norm gains 1, raw decay rates `softplus⁻¹(1)`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<KtModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, shape, init) in layout(config) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal => (0..n).map(|_| truncated_normal(&mut rng, &dist, INIT_STD)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
        };
        names.push(name);
        params.push(Tensor::new(shape, data)?);
    }
    KtModel::from_parts(config.clone(), names, params)
}

/// Number of scalars [`init_params`] creates for `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    layout(config).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

impl KtModel {
    /// Assembles a model, checking names and shapes against the layout the
    /// config implies.
    pub fn from_parts(config: ModelConfig, names: Vec<String>, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let want = layout(&config);
        if want.len() != names.len() || names.len() != params.len() {
            return Err(KtError::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                want.len(),
                names.len()
            )));
        }
        for ((wn, ws, _), (n, p)) in want.iter().zip(names.iter().zip(&params)) {
            if wn != n || ws.as_slice() != p.shape() {
                return Err(KtError::Checkpoint(format!(
                    "parameter mismatch: expected {wn} {ws:?}, got {n} {:?}",
                    p.shape()
                )));
            }
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(KtModel {
            config,
            names,
            params,
            index,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).copied().map(move |i| &mut self.params[i])
    }

    pub(crate) fn position(&self, name: &str) -> usize {
        self.index[name]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Total number of attention blocks across the three stacks.
    pub fn num_attention_blocks(&self) -> usize {
        3 * self.config.num_blocks
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: BiasKind) -> ModelConfig {
        ModelConfig {
            vocab_size: 100,
            bias: BiasConfig {
                kind,
                scope: BiasScope::AllBlocks,
            },
            ..Default::default()
        }
    }

    #[test]
    fn counts_by_kind() {
        let none = param_count(&cfg(BiasKind::None));
        assert_eq!(param_count(&cfg(BiasKind::Folibi)), none);
        assert_eq!(param_count(&cfg(BiasKind::Mono)), none + 8 * 6);
        assert_eq!(param_count(&cfg(BiasKind::Rc)), none + 6);
        assert_eq!(param_count(&cfg(BiasKind::Pe)), none + 101 * 64);
        let m = init_params(&cfg(BiasKind::Mono), 0).unwrap();
        assert_eq!(m.param_count(), none + 48);
    }

    #[test]
    fn retriever_only_scope() {
        let mut c = cfg(BiasKind::Mono);
        c.bias.scope = BiasScope::RetrieverOnly;
        assert_eq!(param_count(&c), param_count(&cfg(BiasKind::None)) + 8 * 2);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(&cfg(BiasKind::Rc), 3).unwrap();
        let b = init_params(&cfg(BiasKind::Rc), 3).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg(BiasKind::Rc), 4).unwrap();
        assert_ne!(a, c);
        let w = a.param("retriever.1.attn.wq").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        assert!(a
            .param("question.0.ln1.gamma")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        let s = a.param("retriever.0.rc.s_raw").unwrap().item();
        assert!((crate::numerics::softplus(s) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = cfg(BiasKind::None);
        c.num_heads = 7;
        assert!(init_params(&c, 0).is_err());
    }
}
