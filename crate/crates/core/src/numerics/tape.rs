//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends one node holding its output value and the handles of its
//! inputs. Handles are indices into the tape, so inputs always precede the
//! node that consumes them and a single reverse sweep visits each node once.

use std::rc::Rc;

use super::kernels::{self, add_assign, gemm_nn, gemm_nt, gemm_tn, sigmoid, softplus};
use super::tensor::Tensor;
use crate::error::{KtError, Result};

/// Clamp applied to predictions before the log in [`Tape::bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean mask with the same shape as the tensor it filters. Cheap to clone.
#[derive(Clone, Debug)]
pub struct Mask {
    shape: Vec<usize>,
    data: Rc<[bool]>,
}

impl Mask {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(KtError::shape("Mask::new", &shape, &[data.len()]));
        }
        Ok(Mask {
            shape,
            data: data.into(),
        })
    }

    pub fn all(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Mask {
            shape,
            data: vec![true; n].into(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }
}

/// How a smaller `[K, ...]` operand is broadcast against a `[G, ...]` one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupMap {
    /// group `g` uses slice `g % K` (per-head tensors against `[B·H, ...]`).
    Cycle,
    /// group `g` uses slice `g / (G / K)` (per-row tensors against `[B·H, ...]`).
    Repeat,
}

impl GroupMap {
    fn source(self, g: usize, groups: usize, k: usize) -> usize {
        match self {
            GroupMap::Cycle => g % k,
            GroupMap::Repeat => g / (groups / k),
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        g: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        alpha: f64,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    AddGrouped {
        x: Var,
        y: Var,
        map: GroupMap,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    Concat {
        a: Var,
        b: Var,
        p: usize,
        q: usize,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
    },
    MaskedSoftmax {
        x: Var,
        mask: Mask,
    },
    Bce {
        pred: Var,
        labels: Vec<f64>,
        valid: Vec<bool>,
        count: usize,
    },
    MonoDecay {
        scores: Var,
        raw: Var,
        dist: Rc<[f64]>,
        decay: Vec<f64>,
    },
    CosineSim {
        x: Var,
        batch: usize,
        len: usize,
        dim: usize,
        norms: Vec<f64>,
    },
    RcRecency {
        logits: Var,
        raw: Var,
        len: usize,
    },
}

/// Recording of a forward computation.
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    requires_grad: Vec<bool>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            requires_grad: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(KtError::NonFinite(op_name));
        }
        self.values.push(value);
        self.grads.push(None);
        self.requires_grad.push(requires_grad);
        self.ops.push(op);
        Ok(Var(self.values.len() - 1))
    }

    /// Trainable input: gradients accumulate into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        assert!(value.is_finite(), "non-finite leaf");
        self.values.push(value);
        self.grads.push(None);
        self.requires_grad.push(requires_grad);
        self.ops.push(Op::Leaf);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Gradient accumulated by [`Tape::backward`]; `None` if the value does
    /// not require grad or was unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as an owned buffer, zeros when nothing flowed into `v`.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.values[v.0].numel()])
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad[v.0])
    }

    // ---------------------------------------------------------------- ops

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(KtError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.values[a.0].data(), self.values[b.0].data(), &mut out, m, k, n, 1.0);
        let rg = self.rg(&[a, b]);
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, m, k, n },
            rg,
        )
    }

    /// Batched product of `a[G×m×k]` with `b[G×k×n]`, or with `b[G×n×k]ᵀ`
    /// when `trans_b`; the result is scaled by `alpha`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool, alpha: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(KtError::shape("bmm", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(KtError::shape("bmm", sa, sb));
        }
        let mut out = vec![0.0; g * m * n];
        {
            let (ad, bd) = (self.values[a.0].data(), self.values[b.0].data());
            for gi in 0..g {
                let asl = &ad[gi * m * k..(gi + 1) * m * k];
                let bsl = &bd[gi * k * n..(gi + 1) * k * n];
                let csl = &mut out[gi * m * n..(gi + 1) * m * n];
                if trans_b {
                    gemm_nt(asl, bsl, csl, m, k, n, alpha);
                } else {
                    gemm_nn(asl, bsl, csl, m, k, n, alpha);
                }
            }
        }
        let rg = self.rg(&[a, b]);
        let op = Op::Bmm {
            a,
            b,
            g,
            m,
            k,
            n,
            trans_b,
            alpha,
        };
        self.push("bmm", Tensor::from_parts(vec![g, m, n], out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(KtError::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push("add", Tensor::from_parts(shape, out), Op::Add(a, b), rg)
    }

    /// Adds `bias[n]` to every length-`n` row of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.values[x.0].last_dim();
        if self.shape(bias) != [n] {
            return Err(KtError::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.values[bias.0].data();
        let mut out = self.values[x.0].data().to_vec();
        for row in out.chunks_mut(n) {
            add_assign(row, b);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        self.push("add_bias", Tensor::from_parts(shape, out), Op::AddBias(x, bias), rg)
    }

    /// `x[G, ...] + y[K, ...]` with `y` broadcast over groups per `map`.
    pub fn add_grouped(&mut self, x: Var, y: Var, map: GroupMap) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sx.is_empty() || sx.len() != sy.len() || sx[1..] != sy[1..] || sy[0] == 0 || sx[0] % sy[0] != 0 {
            return Err(KtError::shape("add_grouped", sx, sy));
        }
        let (groups, k) = (sx[0], sy[0]);
        let inner: usize = sx[1..].iter().product();
        let mut out = self.values[x.0].data().to_vec();
        let yd = self.values[y.0].data();
        for g in 0..groups {
            let s = map.source(g, groups, k);
            add_assign(&mut out[g * inner..(g + 1) * inner], &yd[s * inner..(s + 1) * inner]);
        }
        let shape = sx.to_vec();
        let rg = self.rg(&[x, y]);
        self.push(
            "add_grouped",
            Tensor::from_parts(shape, out),
            Op::AddGrouped { x, y, map },
            rg,
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(KtError::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push("mul", Tensor::from_parts(shape, out), Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.values[x.0].data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push("scale", Tensor::from_parts(shape, out), Op::Scale(x, c), rg)
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.values[x.0].numel() {
            return Err(KtError::shape("reshape", self.shape(x), shape));
        }
        let out = Tensor::from_parts(shape.to_vec(), self.values[x.0].data().to_vec());
        let rg = self.rg(&[x]);
        self.push("reshape", out, Op::Reshape(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.values[x.0].data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push("relu", Tensor::from_parts(shape, out), Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.values[x.0].data().iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push("sigmoid", Tensor::from_parts(shape, out), Op::Sigmoid(x), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.values[x.0].data().iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Layer normalization over the trailing axis with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.values[x.0].last_dim();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(KtError::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xd = self.values[x.0].data();
        let (gd, bd) = (self.values[gamma.0].data(), self.values[beta.0].data());
        let rows = xd.len() / n;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..n {
                let h = (row[i] - mean) * rs;
                xhat[r * n + i] = h;
                out[r * n + i] = h * gd[i] + bd[i];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push("layer_norm", Tensor::from_parts(shape, out), op, rg)
    }

    /// Row lookup: `table[V×n]` indexed by `idx` gives `[idx.len()×n]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(KtError::shape("gather_rows", st, &[]));
        }
        let (v, n) = (st[0], st[1]);
        let td = self.values[table.0].data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= v {
                return Err(KtError::OutOfRange {
                    what: "gather_rows",
                    index: i,
                    size: v,
                });
            }
            out.extend_from_slice(&td[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[table]);
        let op = Op::Gather {
            table,
            idx: idx.to_vec(),
        };
        self.push("gather_rows", Tensor::from_parts(vec![idx.len(), n], out), op, rg)
    }

    /// Column-wise concatenation of `a[N×p]` and `b[N×q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(KtError::shape("concat_cols", sa, sb));
        }
        let (rows, p, q) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.values[a.0].data(), self.values[b.0].data());
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&ad[r * p..(r + 1) * p]);
            out.extend_from_slice(&bd[r * q..(r + 1) * q]);
        }
        let rg = self.rg(&[a, b]);
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![rows, p + q], out),
            Op::Concat { a, b, p, q },
            rg,
        )
    }

    /// `[B·L, H·dh]` → `[B·H, L, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[0] != batch * len || heads == 0 || !sx[1].is_multiple_of(heads) {
            return Err(KtError::shape("split_heads", sx, &[batch, len, heads]));
        }
        let d = sx[1];
        let dh = d / heads;
        let xd = self.values[x.0].data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for t in 0..len {
                let src = &xd[(b * len + t) * d..(b * len + t + 1) * d];
                for h in 0..heads {
                    let dst = ((b * heads + h) * len + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        let rg = self.rg(&[x]);
        let op = Op::SplitHeads { x, batch, len, heads };
        self.push(
            "split_heads",
            Tensor::from_parts(vec![batch * heads, len, dh], out),
            op,
            rg,
        )
    }

    /// `[B·H, L, dh]` → `[B·L, H·dh]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || sx[0] != batch * heads {
            return Err(KtError::shape("merge_heads", sx, &[batch, heads]));
        }
        let (len, dh) = (sx[1], sx[2]);
        let d = dh * heads;
        let xd = self.values[x.0].data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..len {
                    let src = ((b * heads + h) * len + t) * dh;
                    let dst = (b * len + t) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        let rg = self.rg(&[x]);
        let op = Op::MergeHeads { x, batch, len, heads };
        self.push("merge_heads", Tensor::from_parts(vec![batch * len, d], out), op, rg)
    }

    /// Softmax along the trailing axis restricted to positions where `mask`
    /// is true. Masked entries are exactly 0. A row with no valid entry is an
    /// error.
    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        self.masked_softmax_impl(x, mask, false)
    }

    /// Like [`Tape::masked_softmax`] but rows without any valid entry become
    /// all-zero rows (used for the first retriever query, which has no past).
    pub fn masked_softmax_allow_empty(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        self.masked_softmax_impl(x, mask, true)
    }

    fn masked_softmax_impl(&mut self, x: Var, mask: &Mask, allow_empty: bool) -> Result<Var> {
        if self.shape(x) != mask.shape() {
            return Err(KtError::shape("masked_softmax", self.shape(x), mask.shape()));
        }
        let n = self.values[x.0].last_dim();
        let xd = self.values[x.0].data();
        let mut out = vec![0.0; xd.len()];
        for (r, ((row, valid), o)) in xd
            .chunks(n)
            .zip(mask.data().chunks(n))
            .zip(out.chunks_mut(n))
            .enumerate()
        {
            if !kernels::masked_softmax_row(row, valid, o) && !allow_empty {
                return Err(KtError::DegenerateRow {
                    op: "masked_softmax",
                    row: r,
                });
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        let op = Op::MaskedSoftmax { x, mask: mask.clone() };
        self.push("masked_softmax", Tensor::from_parts(shape, out), op, rg)
    }

    /// Mean binary cross-entropy over valid positions; predictions are
    /// clamped to `[BCE_EPS, 1 − BCE_EPS]` before the log.
    pub fn bce_loss(&mut self, pred: Var, labels: &[f64], valid: &[bool]) -> Result<Var> {
        let pd = self.values[pred.0].data();
        if labels.len() != pd.len() || valid.len() != pd.len() {
            return Err(KtError::shape(
                "bce_loss",
                self.shape(pred),
                &[labels.len(), valid.len()],
            ));
        }
        let mut total = 0.0;
        let mut count = 0;
        for ((&p, &r), &ok) in pd.iter().zip(labels).zip(valid) {
            if ok {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                total -= r * p.ln() + (1.0 - r) * (1.0 - p).ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(KtError::DegenerateBatch("bce_loss"));
        }
        let rg = self.rg(&[pred]);
        let op = Op::Bce {
            pred,
            labels: labels.to_vec(),
            valid: valid.to_vec(),
            count,
        };
        self.push("bce_loss", Tensor::scalar(total / count as f64), op, rg)
    }

    /// Monotonic-attention logits: `scores · exp(−θ_h · dist)` where
    /// `θ = softplus(raw)` has one entry per head, `scores` and `dist` are
    /// `[B·H, L, L]`, and `dist` is a constant (no gradient flows into it).
    pub fn mono_decay(&mut self, scores: Var, raw: Var, dist: Rc<[f64]>) -> Result<Var> {
        let ss = self.shape(scores);
        let heads = self.values[raw.0].numel();
        if ss.len() != 3 || dist.len() != self.values[scores.0].numel() || heads == 0 || !ss[0].is_multiple_of(heads) {
            return Err(KtError::shape("mono_decay", ss, self.shape(raw)));
        }
        let (groups, inner) = (ss[0], ss[1] * ss[2]);
        let theta: Vec<f64> = self.values[raw.0].data().iter().map(|&r| softplus(r)).collect();
        let sd = self.values[scores.0].data();
        let mut decay = vec![0.0; sd.len()];
        let mut out = vec![0.0; sd.len()];
        for g in 0..groups {
            let th = theta[g % heads];
            for i in g * inner..(g + 1) * inner {
                let e = (-th * dist[i]).exp();
                decay[i] = e;
                out[i] = sd[i] * e;
            }
        }
        let shape = ss.to_vec();
        let rg = self.rg(&[scores, raw]);
        let op = Op::MonoDecay {
            scores,
            raw,
            dist,
            decay,
        };
        self.push("mono_decay", Tensor::from_parts(shape, out), op, rg)
    }

    /// Pairwise cosine similarity of the rows of `x[B, L, d]`, giving `[B, L, L]`.
    pub fn cosine_sim(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 {
            return Err(KtError::shape("cosine_sim", sx, &[]));
        }
        let (batch, len, dim) = (sx[0], sx[1], sx[2]);
        let xd = self.values[x.0].data();
        let norms: Vec<f64> = xd
            .chunks(dim)
            .map(|r| (r.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt())
            .collect();
        let mut out = vec![0.0; batch * len * len];
        for b in 0..batch {
            for i in 0..len {
                let ri = &xd[(b * len + i) * dim..(b * len + i + 1) * dim];
                for j in 0..len {
                    let rj = &xd[(b * len + j) * dim..(b * len + j + 1) * dim];
                    let dot: f64 = ri.iter().zip(rj).map(|(p, q)| p * q).sum();
                    out[(b * len + i) * len + j] = dot / (norms[b * len + i] * norms[b * len + j]);
                }
            }
        }
        let rg = self.rg(&[x]);
        let op = Op::CosineSim {
            x,
            batch,
            len,
            dim,
            norms,
        };
        self.push("cosine_sim", Tensor::from_parts(vec![batch, len, len], out), op, rg)
    }

    /// Adds the recency term `exp(−(i − j)/S)` with `S = softplus(raw)` to
    /// every entry `(i, j ≤ i)` of `logits[B, L, L]`; entries with `j > i`
    /// pass through unchanged.
    pub fn rc_recency(&mut self, logits: Var, raw: Var) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 3 || sl[1] != sl[2] || self.values[raw.0].numel() != 1 {
            return Err(KtError::shape("rc_recency", sl, self.shape(raw)));
        }
        let len = sl[1];
        let s = softplus(self.values[raw.0].item());
        let mut out = self.values[logits.0].data().to_vec();
        for block in out.chunks_mut(len * len) {
            for i in 0..len {
                for j in 0..=i {
                    block[i * len + j] += (-((i - j) as f64) / s).exp();
                }
            }
        }
        let shape = sl.to_vec();
        let rg = self.rg(&[logits, raw]);
        self.push(
            "rc_recency",
            Tensor::from_parts(shape, out),
            Op::RcRecency { logits, raw, len },
            rg,
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`, accumulating into every reachable
    /// value that requires grad. Gradients from earlier calls are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(KtError::NonScalarLoss(self.values[loss.0].shape().to_vec()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.requires_grad[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let values = &self.values;
        let rgs = &self.requires_grad;
        let grads = &mut self.grads;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(grads, rgs, values, $v)
            };
        }
        let val = |v: Var| values[v.0].data();

        match &self.ops[i] {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = slot!(a) {
                    gemm_nt(g, val(b), ga, m, n, k, 1.0);
                }
                if let Some(gb) = slot!(b) {
                    gemm_tn(val(a), g, gb, k, m, n, 1.0);
                }
            }
            &Op::Bmm {
                a,
                b,
                g: groups,
                m,
                k,
                n,
                trans_b,
                alpha,
            } => {
                let (ad, bd) = (val(a), val(b));
                if let Some(ga) = slot!(a) {
                    for gi in 0..groups {
                        let gsl = &g[gi * m * n..(gi + 1) * m * n];
                        let bsl = &bd[gi * k * n..(gi + 1) * k * n];
                        let dst = &mut ga[gi * m * k..(gi + 1) * m * k];
                        if trans_b {
                            // b is [n×k]
                            gemm_nn(gsl, bsl, dst, m, n, k, alpha);
                        } else {
                            gemm_nt(gsl, bsl, dst, m, n, k, alpha);
                        }
                    }
                }
                if let Some(gb) = slot!(b) {
                    for gi in 0..groups {
                        let gsl = &g[gi * m * n..(gi + 1) * m * n];
                        let asl = &ad[gi * m * k..(gi + 1) * m * k];
                        let dst = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if trans_b {
                            // d(bᵀ) = aᵀ·g, so d(b) = gᵀ·a : [n×k]
                            gemm_tn(gsl, asl, dst, n, m, k, alpha);
                        } else {
                            gemm_tn(asl, gsl, dst, k, m, n, alpha);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = slot!(a) {
                    add_assign(ga, g);
                }
                if let Some(gb) = slot!(b) {
                    add_assign(gb, g);
                }
            }
            &Op::AddBias(x, bias) => {
                if let Some(gx) = slot!(x) {
                    add_assign(gx, g);
                }
                if let Some(gb) = slot!(bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_assign(gb, row);
                    }
                }
            }
            &Op::AddGrouped { x, y, map } => {
                if let Some(gx) = slot!(x) {
                    add_assign(gx, g);
                }
                let groups = values[x.0].shape()[0];
                let k = values[y.0].shape()[0];
                if let Some(gy) = slot!(y) {
                    let inner = gy.len() / k;
                    for gi in 0..groups {
                        let s = map.source(gi, groups, k);
                        add_assign(&mut gy[s * inner..(s + 1) * inner], &g[gi * inner..(gi + 1) * inner]);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = slot!(a) {
                    for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(val(b)) {
                        *d += gv * bv;
                    }
                }
                if let Some(gb) = slot!(b) {
                    for ((d, &gv), &av) in gb.iter_mut().zip(g).zip(val(a)) {
                        *d += gv * av;
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(gx) = slot!(x) {
                    for (d, &gv) in gx.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = slot!(x) {
                    add_assign(gx, g);
                }
            }
            &Op::Relu(x) => {
                if let Some(gx) = slot!(x) {
                    for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(val(x)) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                let y = values[i].data();
                if let Some(gx) = slot!(x) {
                    for ((d, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = slot!(x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = values[gamma.0].numel();
                let gd = val(*gamma);
                if let Some(gg) = slot!(*gamma) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = slot!(*beta) {
                    for grow in g.chunks(n) {
                        add_assign(gb, grow);
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let mut dh = vec![0.0; n];
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            dh[j] = grow[j] * gd[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hrow[j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        let dst = &mut gx[r * n..(r + 1) * n];
                        for j in 0..n {
                            dst[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gather { table, idx } => {
                if let Some(gt) = slot!(*table) {
                    let n = values[table.0].shape()[1];
                    for (r, &row) in idx.iter().enumerate() {
                        add_assign(&mut gt[row * n..(row + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            &Op::Concat { a, b, p, q } => {
                let w = p + q;
                if let Some(ga) = slot!(a) {
                    for (r, grow) in g.chunks(w).enumerate() {
                        add_assign(&mut ga[r * p..(r + 1) * p], &grow[..p]);
                    }
                }
                if let Some(gb) = slot!(b) {
                    for (r, grow) in g.chunks(w).enumerate() {
                        add_assign(&mut gb[r * q..(r + 1) * q], &grow[p..]);
                    }
                }
            }
            &Op::SplitHeads { x, batch, len, heads } => {
                if let Some(gx) = slot!(x) {
                    let d = gx.len() / (batch * len);
                    let dh = d / heads;
                    for b in 0..batch {
                        for t in 0..len {
                            for h in 0..heads {
                                let src = ((b * heads + h) * len + t) * dh;
                                let dst = (b * len + t) * d + h * dh;
                                add_assign(&mut gx[dst..dst + dh], &g[src..src + dh]);
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads { x, batch, len, heads } => {
                if let Some(gx) = slot!(x) {
                    let d = g.len() / (batch * len);
                    let dh = d / heads;
                    for b in 0..batch {
                        for h in 0..heads {
                            for t in 0..len {
                                let dst = ((b * heads + h) * len + t) * dh;
                                let src = (b * len + t) * d + h * dh;
                                add_assign(&mut gx[dst..dst + dh], &g[src..src + dh]);
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, mask } => {
                let y = values[i].data();
                if let Some(gx) = slot!(*x) {
                    let n = values[x.0].last_dim();
                    for (((yr, gr), mr), dst) in y
                        .chunks(n)
                        .zip(g.chunks(n))
                        .zip(mask.data().chunks(n))
                        .zip(gx.chunks_mut(n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            if mr[j] {
                                dst[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::Bce {
                pred,
                labels,
                valid,
                count,
            } => {
                let pd = val(*pred);
                if let Some(gp) = slot!(*pred) {
                    let scale = g[0] / *count as f64;
                    for j in 0..pd.len() {
                        let p = pd[j];
                        if !valid[j] || !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                            continue;
                        }
                        gp[j] += scale * (p - labels[j]) / (p * (1.0 - p));
                    }
                }
            }
            Op::MonoDecay {
                scores,
                raw,
                dist,
                decay,
            } => {
                let sd = val(*scores);
                let heads = values[raw.0].numel();
                let inner = values[scores.0].shape()[1] * values[scores.0].shape()[2];
                if let Some(gs) = slot!(*scores) {
                    for ((d, &gv), &e) in gs.iter_mut().zip(g).zip(decay) {
                        *d += gv * e;
                    }
                }
                let raw_vals = val(*raw).to_vec();
                if let Some(gr) = slot!(*raw) {
                    let groups = sd.len() / inner;
                    for gi in 0..groups {
                        let h = gi % heads;
                        let mut acc = 0.0;
                        for j in gi * inner..(gi + 1) * inner {
                            acc -= g[j] * sd[j] * decay[j] * dist[j];
                        }
                        gr[h] += acc * sigmoid(raw_vals[h]);
                    }
                }
            }
            Op::CosineSim {
                x,
                batch,
                len,
                dim,
                norms,
            } => {
                let (batch, len, dim) = (*batch, *len, *dim);
                let xd = val(*x);
                let c = values[i].data();
                if let Some(gx) = slot!(*x) {
                    for b in 0..batch {
                        for i2 in 0..len {
                            let ni = norms[b * len + i2];
                            let oi = (b * len + i2) * dim;
                            for j in 0..len {
                                let gc = g[(b * len + i2) * len + j];
                                if gc == 0.0 {
                                    continue;
                                }
                                let nj = norms[b * len + j];
                                let oj = (b * len + j) * dim;
                                let cij = c[(b * len + i2) * len + j];
                                // dc/dxi = xj/(ni nj) − c xi/ni², and symmetric for xj
                                let (a1, a2) = (gc / (ni * nj), gc * cij / (ni * ni));
                                let (b1, b2) = (gc / (ni * nj), gc * cij / (nj * nj));
                                for e in 0..dim {
                                    let (xi, xj) = (xd[oi + e], xd[oj + e]);
                                    gx[oi + e] += a1 * xj - a2 * xi;
                                    gx[oj + e] += b1 * xi - b2 * xj;
                                }
                            }
                        }
                    }
                }
            }
            &Op::RcRecency { logits, raw, len } => {
                if let Some(gl) = slot!(logits) {
                    add_assign(gl, g);
                }
                let r = val(raw)[0];
                if let Some(gr) = slot!(raw) {
                    let s = softplus(r);
                    let mut acc = 0.0;
                    for block in g.chunks(len * len) {
                        for i2 in 0..len {
                            for j in 0..=i2 {
                                let delta = (i2 - j) as f64;
                                acc += block[i2 * len + j] * (-delta / s).exp() * delta / (s * s);
                            }
                        }
                    }
                    gr[0] += acc * sigmoid(r);
                }
            }
        }
    }
}

/// Gradient buffer for `v`, allocated on first use; None when `v` is frozen.
fn grad_slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    rgs: &[bool],
    values: &[Tensor],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !rgs[v.0] {
        return None;
    }
    let n = values[v.0].numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}
