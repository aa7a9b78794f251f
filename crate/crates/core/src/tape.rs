//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The tape owns every intermediate value of a forward pass. Operations
//! append nodes in topological order; [`Tape::backward`] walks the tape
//! in reverse exactly once, accumulating gradients. The engine is
//! generic over [`Real`] so the same operator code runs in f32 for
//! training and in f64 inside finite-difference oracles.
//!
//! Scope is deliberately narrow: 2D tensors, no broadcasting beyond
//! per-row bias/affine, single-threaded execution. Token dropping is
//! done by callers via `select_rows`/`scatter_rows`, not inside kernels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Float abstraction for the dual f32 (training) / f64 (oracle) builds.
pub trait Real:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(x: f32) -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn to_f32(self) -> f32;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxr(self, other: Self) -> Self;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f32(x: f32) -> Self {
                x as $t
            }
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn to_f32(self) -> f32 {
                self as f32
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maxr(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
        }
    };
}
impl_real!(f32);
impl_real!(f64);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    AddRow { a: TensorId, row: TensorId },
    Relu { a: TensorId },
    Sigmoid { a: TensorId },
    Softmax { a: TensorId },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId },
    Attention { q: TensorId, k: TensorId, v: TensorId, heads: usize },
    RowNormalize { a: TensorId },
    ConcatRows { a: TensorId, b: TensorId },
    SliceRows { a: TensorId, start: usize, len: usize },
    SelectRows { a: TensorId, indices: Vec<usize> },
    ScatterRows { base: TensorId, rows: TensorId, indices: Vec<usize> },
    GatherRows { table: TensorId, indices: Vec<usize> },
    StraightThrough { v: TensorId },
    Detach,
    Sum { a: TensorId },
    Mean { a: TensorId },
    MseLoss { a: TensorId, b: TensorId },
    L1Loss { a: TensorId, b: TensorId },
    CrossEntropySmoothed { logits: TensorId, targets: Vec<usize>, epsilon: f64 },
}

struct Node<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    op: Op,
    requires_grad: bool,
    /// Op-specific forward state reused by backward (softmax probs,
    /// layer-norm statistics, attention probabilities).
    aux: Vec<F>,
    param: Option<String>,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => {
            let last = *shape.last().unwrap();
            (shape.iter().product::<usize>() / last, last)
        }
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op, requires_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op, requires_grad, aux: Vec::new(), param: None });
        TensorId(self.nodes.len() - 1)
    }

    fn push_aux(
        &mut self,
        shape: Vec<usize>,
        data: Vec<F>,
        op: Op,
        requires_grad: bool,
        aux: Vec<F>,
    ) -> TensorId {
        let id = self.push(shape, data, op, requires_grad);
        self.nodes[id.0].aux = aux;
        id
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].data
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.data.iter().map(|x| x.to_f32()).collect()).unwrap()
    }

    pub fn scalar_value(&self, id: TensorId) -> F {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Attention probabilities saved by an `attention` node, as
    /// (heads, n, probs) with probs laid out [heads][query][key].
    pub fn saved_attention(&self, id: TensorId) -> Option<(usize, usize, &[F])> {
        match &self.nodes[id.0].op {
            Op::Attention { heads, q, .. } => {
                let n = rows_cols(&self.nodes[q.0].shape).0;
                Some((*heads, n, &self.nodes[id.0].aux))
            }
            _ => None,
        }
    }

    // ── leaves ──────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> TensorId {
        let data = t.data().iter().map(|&x| F::from_f32(x)).collect();
        self.push(t.shape().to_vec(), data, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        self.leaf(t, false)
    }

    pub fn leaf_raw(&mut self, shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> TensorId {
        self.push(shape, data, Op::Leaf, requires_grad)
    }

    /// Leaf bound to a named parameter; `export_grads` routes its
    /// gradient back to the owning store.
    pub fn param(&mut self, name: &str, t: &Tensor, trainable: bool) -> TensorId {
        let id = self.leaf(t, trainable);
        self.nodes[id.0].param = Some(name.to_string());
        id
    }

    // ── arithmetic ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::ZERO; m * n];
        matmul_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b }, rg))
    }

    fn binary_same_shape(&mut self, a: TensorId, b: TensorId, ctx: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(ctx, &self.nodes[a.0].shape.clone(), &self.nodes[b.0].shape.clone()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let fc = F::from_f64(c);
        let data: Vec<F> = self.nodes[a.0].data.iter().map(|&x| x * fc).collect();
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Scale { a, c }, rg)
    }

    /// Broadcast-add a row vector [d] to every row of a [n, d] tensor.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (n, d) = rows_cols(self.shape(a));
        if self.nodes[row.0].data.len() != d {
            return Err(Error::shape("add_row", &self.nodes[a.0].shape.clone(), &self.nodes[row.0].shape.clone()));
        }
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += self.nodes[row.0].data[j];
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::AddRow { a, row }, rg))
    }

    // ── nonlinearities ──────────────────────────────────────────────

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > F::ZERO { x } else { F::ZERO })
            .collect();
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Relu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| F::ONE / (F::ONE + (-x).exp()))
            .collect();
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Sigmoid { a }, rg)
    }

    /// Softmax along the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let (n, d) = rows_cols(self.shape(a));
        let mut data = vec![F::ZERO; n * d];
        softmax_rows(&self.nodes[a.0].data, &mut data, n, d);
        let rg = self.rg(a);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Softmax { a }, rg)
    }

    /// Per-row zero-mean/unit-variance normalization followed by an
    /// affine with `gain`/`bias` of width d.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        let (n, d) = rows_cols(self.shape(x));
        if self.nodes[gain.0].data.len() != d || self.nodes[bias.0].data.len() != d {
            return Err(Error::shape("layer_norm", &self.nodes[x.0].shape.clone(), &self.nodes[gain.0].shape.clone()));
        }
        let epsf = F::from_f64(eps);
        let mut data = vec![F::ZERO; n * d];
        // aux: [mean_0, rstd_0, mean_1, rstd_1, ...]
        let mut aux = vec![F::ZERO; 2 * n];
        let xd = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let inv_d = F::ONE / F::from_f64(d as f64);
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mut mean = F::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = F::ZERO;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var = var * inv_d;
            let rstd = F::ONE / (var + epsf).sqrt();
            aux[2 * i] = mean;
            aux[2 * i + 1] = rstd;
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push_aux(self.nodes[x.0].shape.clone(), data, Op::LayerNorm { x, gain, bias }, rg, aux))
    }

    /// Multi-head scaled dot-product self/cross attention.
    ///
    /// Q, K, V are [n, d] with d divisible by `heads`; the optional mask
    /// is an additive [n, n] tensor (0 or a large negative sentinel).
    /// `heads == 1` is the plain attention of the single-head contract.
    pub fn attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        heads: usize,
        mask: Option<TensorId>,
    ) -> Result<TensorId> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        if sq.len() != 2 || sk != sq || self.shape(v) != sq.as_slice() {
            return Err(Error::shape("attention", &sq, &sk));
        }
        let (n, d) = (sq[0], sq[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("attention: {d} dims not divisible by {heads} heads")));
        }
        if let Some(m) = mask {
            if self.shape(m) != [n, n] {
                return Err(Error::shape("attention mask", &[n, n], &self.nodes[m.0].shape.clone()));
            }
        }
        let dh = d / heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = vec![F::ZERO; n * d];
        let mut probs = vec![F::ZERO; heads * n * n];
        {
            let qd = &self.nodes[q.0].data;
            let kd = &self.nodes[k.0].data;
            let vd = &self.nodes[v.0].data;
            let md = mask.map(|m| &self.nodes[m.0].data);
            let mut scores = vec![F::ZERO; n * n];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n {
                    for j in 0..n {
                        let mut s = F::ZERO;
                        for c in 0..dh {
                            s += qd[i * d + off + c] * kd[j * d + off + c];
                        }
                        s = s * scale;
                        if let Some(m) = md {
                            s += m[i * n + j];
                        }
                        scores[i * n + j] = s;
                    }
                }
                let p = &mut probs[h * n * n..(h + 1) * n * n];
                softmax_rows(&scores, p, n, n);
                for i in 0..n {
                    for j in 0..n {
                        let w = p[i * n + j];
                        if w != F::ZERO {
                            for c in 0..dh {
                                out[i * d + off + c] += w * vd[j * d + off + c];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push_aux(vec![n, d], out, Op::Attention { q, k, v, heads }, rg, probs))
    }

    /// L2-normalize each row; rows with norm below eps are scaled by 1/eps.
    pub fn row_normalize(&mut self, a: TensorId, eps: f64) -> TensorId {
        let (n, d) = rows_cols(self.shape(a));
        let epsf = F::from_f64(eps);
        let mut data = vec![F::ZERO; n * d];
        let mut aux = vec![F::ZERO; n];
        for i in 0..n {
            let row = &self.nodes[a.0].data[i * d..(i + 1) * d];
            let mut ss = F::ZERO;
            for &v in row {
                ss += v * v;
            }
            let norm = ss.sqrt().maxr(epsf);
            aux[i] = norm;
            for j in 0..d {
                data[i * d + j] = row[j] / norm;
            }
        }
        let rg = self.rg(a);
        self.push_aux(self.nodes[a.0].shape.clone(), data, Op::RowNormalize { a }, rg, aux)
    }

    // ── shape plumbing ──────────────────────────────────────────────

    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (na, da) = rows_cols(self.shape(a));
        let (nb, db) = rows_cols(self.shape(b));
        if da != db {
            return Err(Error::shape("concat_rows", &self.nodes[a.0].shape.clone(), &self.nodes[b.0].shape.clone()));
        }
        let mut data = self.nodes[a.0].data.clone();
        data.extend_from_slice(&self.nodes[b.0].data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![na + nb, da], data, Op::ConcatRows { a, b }, rg))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, d) = rows_cols(self.shape(a));
        if start + len > n {
            return Err(Error::IndexOutOfRange { context: "slice_rows", index: start + len, limit: n });
        }
        let data = self.nodes[a.0].data[start * d..(start + len) * d].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![len, d], data, Op::SliceRows { a, start, len }, rg))
    }

    pub fn select_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (n, d) = rows_cols(self.shape(a));
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange { context: "select_rows", index: i, limit: n });
            }
            data.extend_from_slice(&self.nodes[a.0].data[i * d..(i + 1) * d]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![indices.len(), d], data, Op::SelectRows { a, indices: indices.to_vec() }, rg))
    }

    /// Copy of `base` with row `indices[r]` replaced by row r of `rows`.
    pub fn scatter_rows(&mut self, base: TensorId, rows: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (n, d) = rows_cols(self.shape(base));
        let (nr, dr) = rows_cols(self.shape(rows));
        if dr != d || nr != indices.len() {
            return Err(Error::shape("scatter_rows", &self.nodes[base.0].shape.clone(), &self.nodes[rows.0].shape.clone()));
        }
        let mut data = self.nodes[base.0].data.clone();
        for (r, &i) in indices.iter().enumerate() {
            if i >= n {
                return Err(Error::IndexOutOfRange { context: "scatter_rows", index: i, limit: n });
            }
            data[i * d..(i + 1) * d].copy_from_slice(&self.nodes[rows.0].data[r * d..(r + 1) * d]);
        }
        let rg = self.rg(base) || self.rg(rows);
        Ok(self.push(vec![n, d], data, Op::ScatterRows { base, rows, indices: indices.to_vec() }, rg))
    }

    /// Embedding lookup: rows of `table` at `indices` (duplicates allowed).
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (n, d) = rows_cols(self.shape(table));
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange { context: "gather_rows", index: i, limit: n });
            }
            data.extend_from_slice(&self.nodes[table.0].data[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![indices.len(), d], data, Op::GatherRows { table, indices: indices.to_vec() }, rg))
    }

    /// Straight-through estimator: forward value is `q`, gradient flows
    /// to `v` unchanged and is blocked toward `q`.
    pub fn straight_through(&mut self, v: TensorId, q: TensorId) -> Result<TensorId> {
        self.binary_same_shape(v, q, "straight_through")?;
        let data = self.nodes[q.0].data.clone();
        let rg = self.rg(v);
        Ok(self.push(self.nodes[v.0].shape.clone(), data, Op::StraightThrough { v }, rg))
    }

    /// Value copy with the gradient path severed (stopgrad).
    pub fn detach(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.clone();
        self.push(self.nodes[a.0].shape.clone(), data, Op::Detach, false)
    }

    // ── reductions & losses ─────────────────────────────────────────

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut s = F::ZERO;
        for &v in &self.nodes[a.0].data {
            s += v;
        }
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len();
        let mut s = F::ZERO;
        for &v in &self.nodes[a.0].data {
            s += v;
        }
        let rg = self.rg(a);
        self.push(vec![1], vec![s / F::from_f64(n as f64)], Op::Mean { a }, rg)
    }

    pub fn mse_loss(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "mse_loss")?;
        let n = self.nodes[a.0].data.len();
        let mut s = F::ZERO;
        for (&x, &y) in self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data) {
            s += (x - y) * (x - y);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![s / F::from_f64(n as f64)], Op::MseLoss { a, b }, rg))
    }

    pub fn l1_loss(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "l1_loss")?;
        let n = self.nodes[a.0].data.len();
        let mut s = F::ZERO;
        for (&x, &y) in self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data) {
            s += (x - y).abs();
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![s / F::from_f64(n as f64)], Op::L1Loss { a, b }, rg))
    }

    /// Mean label-smoothed cross-entropy of `logits` [n, K] against
    /// integer targets: weight 1-eps on the target class, eps/(K-1)
    /// spread over the rest.
    pub fn cross_entropy_smoothed(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        epsilon: f64,
    ) -> Result<TensorId> {
        let (n, k) = rows_cols(self.shape(logits));
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                n
            )));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside [0,1)")));
        }
        for &t in targets {
            if t >= k {
                return Err(Error::IndexOutOfRange { context: "cross_entropy target", index: t, limit: k });
            }
        }
        let mut probs = vec![F::ZERO; n * k];
        softmax_rows(&self.nodes[logits.0].data, &mut probs, n, k);
        let off_w = if k > 1 { epsilon / (k as f64 - 1.0) } else { 0.0 };
        let (wt, wo) = (F::from_f64(1.0 - epsilon), F::from_f64(off_w));
        let mut loss = F::ZERO;
        let ld = &self.nodes[logits.0].data;
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let mut maxv = row[0];
            for &v in row {
                maxv = maxv.maxr(v);
            }
            let mut lse = F::ZERO;
            for &v in row {
                lse += (v - maxv).exp();
            }
            let lse = lse.ln() + maxv;
            // loss_i = lse - sum_k q_k z_k
            let mut dot = F::ZERO;
            for (j, &z) in row.iter().enumerate() {
                let q = if j == targets[i] { wt } else { wo };
                dot += q * z;
            }
            loss += lse - dot;
        }
        loss = loss / F::from_f64(n as f64);
        let rg = self.rg(logits);
        Ok(self.push_aux(
            vec![1],
            vec![loss],
            Op::CrossEntropySmoothed { logits, targets: targets.to_vec(), epsilon },
            rg,
            probs,
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-topological gradient accumulation from a scalar loss.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![F::ONE]);
        for idx in (0..=loss.0).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = self.grads[idx].take().unwrap();
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf, treating "never touched" as zero.
    pub fn grad_or_zero(&self, id: TensorId) -> Vec<F> {
        match self.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![F::ZERO; self.nodes[id.0].data.len()],
        }
    }

    /// Accumulate `scale * grad` of every param-bound leaf into `sink`.
    pub fn export_grads(&self, scale: f32, mut sink: impl FnMut(&str, &[f32])) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                if let Some(g) = self.grads.get(idx).and_then(|g| g.as_ref()) {
                    let gf: Vec<f32> = g.iter().map(|x| x.to_f32() * scale).collect();
                    sink(name, &gf);
                }
            }
        }
    }

    fn accum(&mut self, id: TensorId, contrib: &[F]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contrib) {
                    *gi += c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn accum_sparse(&mut self, id: TensorId, f: impl FnOnce(&mut [F])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        if self.grads[id.0].is_none() {
            self.grads[id.0] = Some(vec![F::ZERO; self.nodes[id.0].data.len()]);
        }
        let mut g = self.grads[id.0].take().unwrap();
        f(&mut g);
        self.grads[id.0] = Some(g);
    }

    fn backprop_node(&mut self, idx: usize, gout: &[F]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.rg(a) {
                    // dA[i,p] += sum_j dC[i,j] * B[p,j]
                    let mut da = vec![F::ZERO; m * k];
                    let bd = &self.nodes[b.0].data;
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut s = F::ZERO;
                            for (gv, bv) in grow.iter().zip(brow) {
                                s += *gv * *bv;
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.accum(a, &da);
                }
                if self.rg(b) {
                    // dB[p,j] += sum_i A[i,p] * dC[i,j]
                    let mut db = vec![F::ZERO; k * n];
                    let ad = &self.nodes[a.0].data;
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av != F::ZERO {
                                let drow = &mut db[p * n..(p + 1) * n];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv += av * *gv;
                                }
                            }
                        }
                    }
                    self.accum(b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accum(a, gout);
                self.accum(b, gout);
            }
            Op::Sub { a, b } => {
                self.accum(a, gout);
                let neg: Vec<F> = gout.iter().map(|&g| -g).collect();
                self.accum(b, &neg);
            }
            Op::Mul { a, b } => {
                if self.rg(a) {
                    let da: Vec<F> = gout.iter().zip(&self.nodes[b.0].data).map(|(&g, &y)| g * y).collect();
                    self.accum(a, &da);
                }
                if self.rg(b) {
                    let db: Vec<F> = gout.iter().zip(&self.nodes[a.0].data).map(|(&g, &x)| g * x).collect();
                    self.accum(b, &db);
                }
            }
            Op::Scale { a, c } => {
                let fc = F::from_f64(c);
                let da: Vec<F> = gout.iter().map(|&g| g * fc).collect();
                self.accum(a, &da);
            }
            Op::AddRow { a, row } => {
                self.accum(a, gout);
                if self.rg(row) {
                    let d = self.nodes[row.0].data.len();
                    let n = gout.len() / d;
                    let mut dr = vec![F::ZERO; d];
                    for i in 0..n {
                        for j in 0..d {
                            dr[j] += gout[i * d + j];
                        }
                    }
                    self.accum(row, &dr);
                }
            }
            Op::Relu { a } => {
                let da: Vec<F> = gout
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&g, &x)| if x > F::ZERO { g } else { F::ZERO })
                    .collect();
                self.accum(a, &da);
            }
            Op::Sigmoid { a } => {
                let da: Vec<F> = gout
                    .iter()
                    .zip(&self.nodes[idx].data)
                    .map(|(&g, &y)| g * y * (F::ONE - y))
                    .collect();
                self.accum(a, &da);
            }
            Op::Softmax { a } => {
                let (n, d) = rows_cols(&self.nodes[idx].shape);
                let y = &self.nodes[idx].data;
                let mut da = vec![F::ZERO; n * d];
                for i in 0..n {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &gout[i * d..(i + 1) * d];
                    let mut dot = F::ZERO;
                    for (&yv, &gv) in yr.iter().zip(gr) {
                        dot += yv * gv;
                    }
                    for j in 0..d {
                        da[i * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(a, &da);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (n, d) = rows_cols(&self.nodes[x.0].shape);
                let aux = self.nodes[idx].aux.clone();
                let xd = &self.nodes[x.0].data;
                let g = &self.nodes[gain.0].data;
                let inv_d = F::ONE / F::from_f64(d as f64);
                let mut dx = vec![F::ZERO; n * d];
                let mut dgain = vec![F::ZERO; d];
                let mut dbias = vec![F::ZERO; d];
                for i in 0..n {
                    let (mean, rstd) = (aux[2 * i], aux[2 * i + 1]);
                    let gr = &gout[i * d..(i + 1) * d];
                    // xhat and dxhat
                    let mut sum_dxh = F::ZERO;
                    let mut sum_dxh_xh = F::ZERO;
                    for j in 0..d {
                        let xh = (xd[i * d + j] - mean) * rstd;
                        let dxh = gr[j] * g[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        dgain[j] += gr[j] * xh;
                        dbias[j] += gr[j];
                    }
                    let m1 = sum_dxh * inv_d;
                    let m2 = sum_dxh_xh * inv_d;
                    for j in 0..d {
                        let xh = (xd[i * d + j] - mean) * rstd;
                        let dxh = gr[j] * g[j];
                        dx[i * d + j] = rstd * (dxh - m1 - xh * m2);
                    }
                }
                if self.rg(x) {
                    self.accum(x, &dx);
                }
                if self.rg(gain) {
                    self.accum(gain, &dgain);
                }
                if self.rg(bias) {
                    self.accum(bias, &dbias);
                }
            }
            Op::Attention { q, k, v, heads } => {
                let (n, d) = rows_cols(&self.nodes[q.0].shape);
                let dh = d / heads;
                let scale = F::from_f64(1.0 / (dh as f64).sqrt());
                let probs = self.nodes[idx].aux.clone();
                let mut dq = vec![F::ZERO; n * d];
                let mut dk = vec![F::ZERO; n * d];
                let mut dv = vec![F::ZERO; n * d];
                {
                    let qd = &self.nodes[q.0].data;
                    let kd = &self.nodes[k.0].data;
                    let vd = &self.nodes[v.0].data;
                    let mut dp = vec![F::ZERO; n * n];
                    let mut ds = vec![F::ZERO; n * n];
                    for h in 0..heads {
                        let off = h * dh;
                        let p = &probs[h * n * n..(h + 1) * n * n];
                        // dV += P^T dO ; dP = dO V^T
                        for i in 0..n {
                            for j in 0..n {
                                let w = p[i * n + j];
                                let mut s = F::ZERO;
                                for c in 0..dh {
                                    let go = gout[i * d + off + c];
                                    dv[j * d + off + c] += w * go;
                                    s += go * vd[j * d + off + c];
                                }
                                dp[i * n + j] = s;
                            }
                        }
                        // dS = P o (dP - rowsum(dP o P))
                        for i in 0..n {
                            let mut dot = F::ZERO;
                            for j in 0..n {
                                dot += dp[i * n + j] * p[i * n + j];
                            }
                            for j in 0..n {
                                ds[i * n + j] = p[i * n + j] * (dp[i * n + j] - dot);
                            }
                        }
                        // dQ += scale * dS K ; dK += scale * dS^T Q
                        for i in 0..n {
                            for j in 0..n {
                                let s = ds[i * n + j] * scale;
                                if s != F::ZERO {
                                    for c in 0..dh {
                                        dq[i * d + off + c] += s * kd[j * d + off + c];
                                        dk[j * d + off + c] += s * qd[i * d + off + c];
                                    }
                                }
                            }
                        }
                    }
                }
                if self.rg(q) {
                    self.accum(q, &dq);
                }
                if self.rg(k) {
                    self.accum(k, &dk);
                }
                if self.rg(v) {
                    self.accum(v, &dv);
                }
                // mask entries are constants (0 / -inf sentinel); no grad.
            }
            Op::RowNormalize { a } => {
                let (n, d) = rows_cols(&self.nodes[a.0].shape);
                let y = &self.nodes[idx].data;
                let norms = self.nodes[idx].aux.clone();
                let mut da = vec![F::ZERO; n * d];
                for i in 0..n {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &gout[i * d..(i + 1) * d];
                    let mut dot = F::ZERO;
                    for (&yv, &gv) in yr.iter().zip(gr) {
                        dot += yv * gv;
                    }
                    for j in 0..d {
                        da[i * d + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                self.accum(a, &da);
            }
            Op::ConcatRows { a, b } => {
                let la = self.nodes[a.0].data.len();
                self.accum(a, &gout[..la]);
                self.accum(b, &gout[la..]);
            }
            Op::SliceRows { a, start, len } => {
                let (_, d) = rows_cols(&self.nodes[a.0].shape);
                self.accum_sparse(a, |g| {
                    for (gi, &gv) in g[start * d..(start + len) * d].iter_mut().zip(gout) {
                        *gi += gv;
                    }
                });
            }
            Op::SelectRows { a, indices } | Op::GatherRows { table: a, indices } => {
                let (_, d) = rows_cols(&self.nodes[a.0].shape);
                self.accum_sparse(a, |g| {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            g[i * d + j] += gout[r * d + j];
                        }
                    }
                });
            }
            Op::ScatterRows { base, rows, indices } => {
                let (_, d) = rows_cols(&self.nodes[base.0].shape);
                if self.rg(base) {
                    let mut db = gout.to_vec();
                    for &i in &indices {
                        for j in 0..d {
                            db[i * d + j] = F::ZERO;
                        }
                    }
                    self.accum(base, &db);
                }
                if self.rg(rows) {
                    let mut dr = vec![F::ZERO; indices.len() * d];
                    for (r, &i) in indices.iter().enumerate() {
                        dr[r * d..(r + 1) * d].copy_from_slice(&gout[i * d..(i + 1) * d]);
                    }
                    self.accum(rows, &dr);
                }
            }
            Op::StraightThrough { v } => {
                self.accum(v, gout);
            }
            Op::Detach => {}
            Op::Sum { a } => {
                let g = gout[0];
                let da = vec![g; self.nodes[a.0].data.len()];
                self.accum(a, &da);
            }
            Op::Mean { a } => {
                let n = self.nodes[a.0].data.len();
                let g = gout[0] / F::from_f64(n as f64);
                let da = vec![g; n];
                self.accum(a, &da);
            }
            Op::MseLoss { a, b } => {
                let n = self.nodes[a.0].data.len();
                let c = gout[0] * F::from_f64(2.0 / n as f64);
                let diff: Vec<F> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(&x, &y)| (x - y) * c)
                    .collect();
                if self.rg(a) {
                    self.accum(a, &diff);
                }
                if self.rg(b) {
                    let neg: Vec<F> = diff.iter().map(|&x| -x).collect();
                    self.accum(b, &neg);
                }
            }
            Op::L1Loss { a, b } => {
                let n = self.nodes[a.0].data.len();
                let c = gout[0] / F::from_f64(n as f64);
                let sg: Vec<F> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(&x, &y)| {
                        if x > y {
                            c
                        } else if x < y {
                            -c
                        } else {
                            F::ZERO
                        }
                    })
                    .collect();
                if self.rg(a) {
                    self.accum(a, &sg);
                }
                if self.rg(b) {
                    let neg: Vec<F> = sg.iter().map(|&x| -x).collect();
                    self.accum(b, &neg);
                }
            }
            Op::CrossEntropySmoothed { logits, targets, epsilon } => {
                let (n, k) = rows_cols(&self.nodes[logits.0].shape);
                let probs = &self.nodes[idx].aux;
                let off_w = if k > 1 { epsilon / (k as f64 - 1.0) } else { 0.0 };
                let (wt, wo) = (F::from_f64(1.0 - epsilon), F::from_f64(off_w));
                let c = gout[0] / F::from_f64(n as f64);
                let mut dl = vec![F::ZERO; n * k];
                for i in 0..n {
                    for j in 0..k {
                        let q = if j == targets[i] { wt } else { wo };
                        dl[i * k + j] = (probs[i * k + j] - q) * c;
                    }
                }
                self.accum(logits, &dl);
            }
        }
    }
}

/// C += A B with A [m,k], B [k,n], all row-major.
fn matmul_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != F::ZERO {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// Row-wise stable softmax of `x` into `out`, both [n, d].
fn softmax_rows<F: Real>(x: &[F], out: &mut [F], n: usize, d: usize) {
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let orow = &mut out[i * d..(i + 1) * d];
        let mut maxv = row[0];
        for &v in row {
            maxv = maxv.maxr(v);
        }
        let mut sum = F::ZERO;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - maxv).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
}

/// Additive attention-mask sentinel standing in for -inf.
pub const NEG_INF_MASK: f32 = -1e9;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t2(rows: usize, cols: usize, data: Vec<f32>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape: Tape<f32> = Tape::new();
        let i2 = tape.leaf(&Tensor::eye(2), false);
        let b = tape.leaf(&t2(2, 2, vec![3.0, 4.0, 5.0, 6.0]), false);
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_zero() {
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.leaf(&t2(1, 2, vec![1.0, 2.0]), false);
        let b = tape.leaf(&t2(2, 1, vec![0.0, 0.0]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]), false);
        let b = tape.leaf(&Tensor::zeros(vec![4, 2]), false);
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(&t2(1, 3, vec![0.0, 0.0, 0.0]), false);
        let y = tape.softmax(x);
        for &v in tape.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        let x2 = tape.leaf(&t2(1, 2, vec![1000.0, 0.0]), false);
        let y2 = tape.softmax(x2);
        let d = tape.data(y2);
        assert!((d[0] - 1.0).abs() < 1e-6 && d[1].abs() < 1e-6);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(11);
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(&Tensor::randn(vec![5, 9], 10.0, &mut rng), false);
        let y = tape.softmax(x);
        for i in 0..5 {
            let s: f32 = tape.data(y)[i * 9..(i + 1) * 9].iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(&t2(1, 4, vec![7.0; 4]), false);
        let g = tape.leaf(&Tensor::full(vec![4], 1.0), false);
        let b = tape.leaf(&Tensor::zeros(vec![4]), false);
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in tape.data(y) {
            assert!(v.abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(&t2(1, 2, vec![1.0, -1.0]), false);
        let g = tape.leaf(&Tensor::full(vec![2], 1.0), false);
        let b = tape.leaf(&Tensor::zeros(vec![2]), false);
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let d = tape.data(y);
        assert!((d[0] - 1.0).abs() < 1e-4 && (d[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn attention_single_token_returns_v() {
        let mut tape: Tape<f32> = Tape::new();
        let q = tape.leaf(&t2(1, 4, vec![0.3, -0.1, 0.5, 0.9]), false);
        let k = tape.leaf(&t2(1, 4, vec![1.0, 2.0, 3.0, 4.0]), false);
        let v = tape.leaf(&t2(1, 4, vec![5.0, 6.0, 7.0, 8.0]), false);
        let o = tape.attention(q, k, v, 1, None).unwrap();
        assert_eq!(tape.data(o), tape.data(v));
    }

    #[test]
    fn attention_mask_blocks_column_exactly() {
        let mut rng = Rng::new(5);
        let mut tape: Tape<f32> = Tape::new();
        let q = tape.leaf(&Tensor::randn(vec![3, 4], 1.0, &mut rng), false);
        let k = tape.leaf(&Tensor::randn(vec![3, 4], 1.0, &mut rng), false);
        let v = tape.leaf(&Tensor::randn(vec![3, 4], 1.0, &mut rng), false);
        // block column 1 for every query
        let mut m = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            m.data_mut()[i * 3 + 1] = NEG_INF_MASK;
        }
        let mid = tape.leaf(&m, false);
        let o = tape.attention(q, k, v, 2, Some(mid)).unwrap();
        let (heads, n, probs) = tape.saved_attention(o).unwrap();
        for h in 0..heads {
            for i in 0..n {
                assert_eq!(probs[h * n * n + i * n + 1], 0.0);
            }
        }
    }

    #[test]
    fn attention_mask_shape_error() {
        let mut tape: Tape<f32> = Tape::new();
        let q = tape.leaf(&Tensor::zeros(vec![3, 4]), false);
        let m = tape.leaf(&Tensor::zeros(vec![2, 2]), false);
        assert!(tape.attention(q, q, q, 1, Some(m)).is_err());
    }

    #[test]
    fn attention_matches_f64_oracle() {
        // n=3 random case against a direct high-precision evaluation
        let mut rng = Rng::new(17);
        let (n, d) = (3, 4);
        let qt = Tensor::randn(vec![n, d], 1.0, &mut rng);
        let kt = Tensor::randn(vec![n, d], 1.0, &mut rng);
        let vt = Tensor::randn(vec![n, d], 1.0, &mut rng);
        let mut tape: Tape<f32> = Tape::new();
        let q = tape.leaf(&qt, false);
        let k = tape.leaf(&kt, false);
        let v = tape.leaf(&vt, false);
        let o = tape.attention(q, k, v, 1, None).unwrap();
        // oracle
        let scale = 1.0 / (d as f64).sqrt();
        let mut expected = vec![0.0f64; n * d];
        for i in 0..n {
            let mut scores = vec![0.0f64; n];
            for j in 0..n {
                let mut s = 0.0;
                for c in 0..d {
                    s += qt.data()[i * d + c] as f64 * kt.data()[j * d + c] as f64;
                }
                scores[j] = s * scale;
            }
            let maxv = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - maxv).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..n {
                for c in 0..d {
                    expected[i * d + c] += exps[j] / sum * vt.data()[j * d + c] as f64;
                }
            }
        }
        for (got, want) in tape.data(o).iter().zip(&expected) {
            let rel = (*got as f64 - want).abs() / want.abs().max(1e-3);
            assert!(rel < 1e-5, "got {got} want {want}");
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut tape: Tape<f32> = Tape::new();
        let k = 7;
        let logits = tape.leaf(&Tensor::zeros(vec![3, k]), false);
        let loss = tape.cross_entropy_smoothed(logits, &[0, 3, 6], 0.0).unwrap();
        let want = (k as f32).ln();
        assert!((tape.scalar_value(loss) - want).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_confident_correct_goes_to_zero() {
        let mut tape: Tape<f32> = Tape::new();
        let mut l = Tensor::zeros(vec![2, 4]);
        l.data_mut()[1] = 50.0; // row 0 target 1
        l.data_mut()[4 + 2] = 50.0; // row 1 target 2
        let logits = tape.leaf(&l, false);
        let loss = tape.cross_entropy_smoothed(logits, &[1, 2], 0.0).unwrap();
        assert!(tape.scalar_value(loss) < 1e-5);
    }

    #[test]
    fn cross_entropy_matches_f64_oracle_with_smoothing() {
        let mut rng = Rng::new(23);
        let (n, k, eps) = (5, 4, 0.1);
        let lt = Tensor::randn(vec![n, k], 2.0, &mut rng);
        let targets = vec![0, 1, 2, 3, 1];
        let mut tape: Tape<f32> = Tape::new();
        let logits = tape.leaf(&lt, false);
        let loss = tape.cross_entropy_smoothed(logits, &targets, eps).unwrap();
        // 64-bit oracle: -sum_k q_k log p_k averaged over rows
        let mut want = 0.0f64;
        for i in 0..n {
            let row: Vec<f64> = lt.row(i).iter().map(|&x| x as f64).collect();
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|z| (z - maxv).exp()).sum::<f64>().ln() + maxv;
            for (j, &z) in row.iter().enumerate() {
                let q = if j == targets[i] { 1.0 - eps } else { eps / (k as f64 - 1.0) };
                want -= q * (z - lse);
            }
        }
        want /= n as f64;
        let got = tape.scalar_value(loss) as f64;
        assert!((got - want).abs() / want.abs() < 1e-6, "got {got} want {want}");
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut tape: Tape<f32> = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(vec![1, 3]), false);
        assert!(tape.cross_entropy_smoothed(logits, &[3], 0.0).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![2, 3], 2.5), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_zero_scaled_gives_zeros() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![4], 1.0), true);
        let y = tape.sigmoid(x);
        let s = tape.sum(y);
        let z = tape.scale(s, 0.0);
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = Rng::new(99);
            let mut tape: Tape<f32> = Tape::new();
            let x = tape.leaf(&Tensor::randn(vec![4, 4], 1.0, &mut rng), true);
            let w = tape.leaf(&Tensor::randn(vec![4, 4], 1.0, &mut rng), true);
            let h = tape.matmul(x, w).unwrap();
            let h = tape.relu(h);
            let s = tape.mean(h);
            tape.backward(s).unwrap();
            (tape.grad(x).unwrap().to_vec(), tape.grad(w).unwrap().to_vec())
        };
        let (a1, a2) = run();
        let (b1, b2) = run();
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
    }

    #[test]
    fn straight_through_forward_is_q_grad_is_identity() {
        let mut tape: Tape<f32> = Tape::new();
        let v = tape.leaf(&Tensor::full(vec![3], 0.4), true);
        let q = tape.leaf(&Tensor::full(vec![3], 1.0), true);
        let st = tape.straight_through(v, q).unwrap();
        assert_eq!(tape.data(st), tape.data(q));
        let s = tape.sum(st);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[1.0; 3]);
        assert!(tape.grad(q).is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![2], 3.0), true);
        let d = tape.detach(x);
        let y = tape.sum(d);
        tape.backward(y).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn scatter_select_roundtrip_grads() {
        let mut tape: Tape<f32> = Tape::new();
        let base = tape.leaf(&Tensor::zeros(vec![4, 2]), true);
        let rows = tape.leaf(&Tensor::full(vec![2, 2], 1.0), true);
        let out = tape.scatter_rows(base, rows, &[1, 3]).unwrap();
        let s = tape.sum(out);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(base).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(tape.grad(rows).unwrap(), &[1.0; 4]);
    }
}
