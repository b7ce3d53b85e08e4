//! Forgetting-behavior strategies for attention.
//!
//! Each strategy contributes additive terms to a generalized biased attention
//!
//! ```text
//! α = softmax((q·Kᵀ + β) / √d) ⊕ γ
//! ```
//!
//! `β` is added to the logits before scaling, `γ` is mixed into the weights
//! after the softmax. The functions here are the plain-array forms used for
//! analysis and tests; the model evaluates the same formulas on the tape.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KtError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasKind {
    #[default]
    None,
    /// Learned absolute positional embedding added to the inputs.
    Pe,
    /// Monotonic attention: logits decayed by `exp(−θ_h · d)`.
    Mono,
    /// Relational coefficient: softmax of similarity plus exponential recency.
    Rc,
    /// Fixed linear bias over key position with per-head slopes.
    Folibi,
}

impl BiasKind {
    pub const ALL: [BiasKind; 5] = [
        BiasKind::None,
        BiasKind::Pe,
        BiasKind::Mono,
        BiasKind::Rc,
        BiasKind::Folibi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BiasKind::None => "none",
            BiasKind::Pe => "pe",
            BiasKind::Mono => "mono",
            BiasKind::Rc => "rc",
            BiasKind::Folibi => "folibi",
        }
    }
}

impl fmt::Display for BiasKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BiasKind {
    type Err = KtError;

    fn from_str(s: &str) -> Result<Self> {
        BiasKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            KtError::InvalidArgument(format!("unknown bias kind `{s}` (expected none|pe|mono|rc|folibi)"))
        })
    }
}

/// Which attention blocks carry the relative bias.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasScope {
    RetrieverOnly,
    #[default]
    AllBlocks,
}

impl FromStr for BiasScope {
    type Err = KtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retriever_only" => Ok(BiasScope::RetrieverOnly),
            "all_blocks" => Ok(BiasScope::AllBlocks),
            _ => Err(KtError::InvalidArgument(format!("unknown bias scope `{s}`"))),
        }
    }
}

impl fmt::Display for BiasScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BiasScope::RetrieverOnly => "retriever_only",
            BiasScope::AllBlocks => "all_blocks",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasConfig {
    pub kind: BiasKind,
    #[serde(default)]
    pub scope: BiasScope,
}

/// Per-head slopes `m_h = 2^(−8h/H)` for `h = 1..=H`.
pub fn folibi_slopes(heads: usize) -> Vec<f64> {
    (1..=heads).map(|h| 2f64.powf(-8.0 * h as f64 / heads as f64)).collect()
}

/// Linear position bias `[H × t × t]`: entry `(h, i, j)` for `j ≤ i` is
/// `m_h · (j + 1)`, so the most recent key gets the largest bias. Entries
/// above the diagonal are 0 (always masked).
pub fn folibi_beta(t: usize, slopes: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; slopes.len() * t * t];
    for (h, &m) in slopes.iter().enumerate() {
        for i in 0..t {
            for j in 0..=i {
                out[(h * t + i) * t + j] = m * (j + 1) as f64;
            }
        }
    }
    out
}

/// Effective distance for one query at (1-indexed) position `t` to the past
/// key `tau < t`: `(t − τ)` times the similarity mass on keys `τ..t−1`.
/// `sim` holds the normalized similarities of keys `1..t−1` in order.
pub fn effective_distance(sim: &[f64], t: usize, tau: usize) -> Result<f64> {
    if tau == 0 || tau >= t {
        return Err(KtError::InvalidArgument(format!(
            "effective distance needs 1 ≤ τ < t, got τ={tau}, t={t}"
        )));
    }
    if sim.len() < t - 1 {
        return Err(KtError::shape("effective_distance", &[sim.len()], &[t - 1]));
    }
    let mass: f64 = sim[tau - 1..t - 1].iter().sum();
    Ok((t - tau) as f64 * mass)
}

/// Bulk form over `[G, L, L]` weights with a same-shape validity mask:
/// `d[i][j] = (i − j) · Σ_{j' ≥ j, valid} w[i][j']` on valid cells, 0
/// elsewhere. Works for both strict and inclusive causal masks.
pub fn effective_distances(weights: &[f64], valid: &[bool], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; weights.len()];
    for (r, ((w_row, v_row), o_row)) in weights
        .chunks(len)
        .zip(valid.chunks(len))
        .zip(out.chunks_mut(len))
        .enumerate()
    {
        let i = r % len;
        let mut suffix = 0.0;
        for j in (0..len).rev() {
            if v_row[j] {
                suffix += w_row[j];
                o_row[j] = i.abs_diff(j) as f64 * suffix;
            }
        }
    }
    out
}

/// `β = (exp(−θ_h · d) − 1) · (q·k)` for `[H × t × t]` similarity logits and
/// distances. Combined with the base logit this gives `exp(−θ_h d)·q·k`.
pub fn mono_beta(sim_logits: &[f64], distances: &[f64], thetas: &[f64], t: usize) -> Result<Vec<f64>> {
    let per_head = t * t;
    if sim_logits.len() != thetas.len() * per_head || distances.len() != sim_logits.len() {
        return Err(KtError::shape(
            "mono_beta",
            &[sim_logits.len()],
            &[distances.len(), thetas.len()],
        ));
    }
    if let Some(d) = distances.iter().find(|&&d| d < 0.0) {
        return Err(KtError::InvalidArgument(format!("negative distance {d}")));
    }
    Ok(sim_logits
        .iter()
        .zip(distances)
        .enumerate()
        .map(|(i, (&s, &d))| ((-thetas[i / per_head] * d).exp() - 1.0) * s)
        .collect())
}

/// Relational coefficient for a query at 1-indexed position `t` over keys
/// `1..t−1`: `softmax(R^E_τ + exp(−(t − τ)/S))`. `emb_sim` holds `R^E` for
/// those keys.
pub fn rc_gamma(emb_sim: &[f64], t: usize, s: f64) -> Result<Vec<f64>> {
    if t < 2 || emb_sim.len() != t - 1 {
        return Err(KtError::shape("rc_gamma", &[emb_sim.len()], &[t.saturating_sub(1)]));
    }
    if s.is_nan() || s <= 0.0 {
        return Err(KtError::InvalidArgument(format!("RC decay S must be > 0, got {s}")));
    }
    let logits: Vec<f64> = emb_sim
        .iter()
        .enumerate()
        .map(|(k, &re)| re + (-((t - (k + 1)) as f64) / s).exp())
        .collect();
    let mut out = vec![0.0; logits.len()];
    crate::numerics::kernels::masked_softmax_row(&logits, &vec![true; logits.len()], &mut out);
    Ok(out)
}

/// Additive terms for one attention block, `[H × t × t]` each. Missing terms
/// are identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasOutput {
    pub heads: usize,
    pub t: usize,
    pub beta: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
}

impl BiasOutput {
    pub fn none(heads: usize, t: usize) -> Self {
        BiasOutput {
            heads,
            t,
            beta: None,
            gamma: None,
        }
    }

    pub fn folibi(slopes: &[f64], t: usize) -> Self {
        BiasOutput {
            heads: slopes.len(),
            t,
            beta: Some(folibi_beta(t, slopes)),
            gamma: None,
        }
    }

    pub fn with_beta(heads: usize, t: usize, beta: Vec<f64>) -> Self {
        BiasOutput {
            heads,
            t,
            beta: Some(beta),
            gamma: None,
        }
    }

    pub fn with_gamma(heads: usize, t: usize, gamma: Vec<f64>) -> Self {
        BiasOutput {
            heads,
            t,
            beta: None,
            gamma: Some(gamma),
        }
    }
}
