//! Vector quantization shared by the 2D base codebook and the 1D
//! latent codebook. Nearest-code assignment runs its distance scan in
//! f64 so results match an exhaustive high-precision oracle exactly,
//! ties broken toward the lowest index.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Real, Tape, TensorId};
use crate::tensor::Tensor;

/// Learnable code matrix plus usage statistics.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub codes: Tensor, // [K, d_code]
    pub usage: Vec<u64>,
    /// When set, queries and codes are L2-normalized before matching.
    pub normalized: bool,
}

impl Codebook {
    pub fn new(codes: Tensor, normalized: bool) -> Self {
        assert!(codes.rows() >= 1 && codes.cols() >= 1);
        let k = codes.rows();
        Codebook { codes, usage: vec![0; k], normalized }
    }

    pub fn k(&self) -> usize {
        self.codes.rows()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn reset_usage(&mut self) {
        self.usage.fill(0);
    }
}

fn l2_normalize_f64(v: &[f32]) -> Vec<f64> {
    let ss: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum();
    let norm = ss.sqrt().max(1e-12);
    v.iter().map(|&x| x as f64 / norm).collect()
}

/// Index of the nearest code by squared Euclidean distance, computed
/// in f64. Normalized codebooks compare unit vectors, which makes the
/// distance ranking identical to cosine-similarity ranking.
pub fn nearest_code(v: &[f32], codebook: &Codebook) -> Result<usize> {
    if v.len() != codebook.dim() {
        return Err(Error::Dimension(format!(
            "query dim {} vs codebook dim {}",
            v.len(),
            codebook.dim()
        )));
    }
    let q = if codebook.normalized { l2_normalize_f64(v) } else { v.iter().map(|&x| x as f64).collect() };
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for i in 0..codebook.k() {
        let code = codebook.codes.row(i);
        let c: Vec<f64> = if codebook.normalized {
            l2_normalize_f64(code)
        } else {
            code.iter().map(|&x| x as f64).collect()
        };
        let d: f64 = q.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

/// Quantize rows of `v` [n, d]: returns per-row indices, the exact
/// quantized rows, and the two VQ losses (commitment pulls `v` toward
/// the codes under stopgrad, codebook pulls codes toward `v`).
/// Updates the usage histogram.
pub fn quantize_batch(
    v: &Tensor,
    codebook: &mut Codebook,
    beta: f32,
) -> Result<(Vec<usize>, Tensor, f32, f32)> {
    if v.cols() != codebook.dim() {
        return Err(Error::Dimension(format!(
            "batch dim {} vs codebook dim {}",
            v.cols(),
            codebook.dim()
        )));
    }
    let n = v.rows();
    let d = v.cols();
    let mut indices = Vec::with_capacity(n);
    let mut quantized = Vec::with_capacity(n * d);
    let mut commit = 0.0f64;
    let mut cb_loss = 0.0f64;
    for i in 0..n {
        let row = v.row(i);
        let idx = nearest_code(row, codebook)?;
        indices.push(idx);
        codebook.usage[idx] += 1;
        let (q, x): (Vec<f64>, Vec<f64>) = if codebook.normalized {
            (l2_normalize_f64(codebook.codes.row(idx)), l2_normalize_f64(row))
        } else {
            (
                codebook.codes.row(idx).iter().map(|&c| c as f64).collect(),
                row.iter().map(|&c| c as f64).collect(),
            )
        };
        for j in 0..d {
            quantized.push(q[j] as f32);
            let diff = x[j] - q[j];
            commit += diff * diff;
            cb_loss += diff * diff;
        }
    }
    let scale = 1.0 / (n * d) as f64;
    Ok((
        indices,
        Tensor::new(vec![n, d], quantized)?,
        (commit * scale) as f32 * beta,
        (cb_loss * scale) as f32,
    ))
}

/// Tape-level quantization used inside training graphs.
pub struct QuantizeNodes {
    pub indices: Vec<usize>,
    /// Straight-through output: forward = quantized rows, gradient = identity to `v`.
    pub quantized: TensorId,
    pub commit_loss: TensorId,
    pub codebook_loss: TensorId,
}

/// Quantize the rows of tape node `v` against the codebook parameter
/// node `codes`. Assignment uses the same f64 scan as [`nearest_code`];
/// gradients flow to `v` through the straight-through estimator and the
/// commitment term, and to `codes` through the codebook term.
pub fn quantize_on_tape<F: Real>(
    tape: &mut Tape<F>,
    v: TensorId,
    codes: TensorId,
    normalized: bool,
    beta: f64,
) -> Result<QuantizeNodes> {
    let (v_n, codes_n) = if normalized {
        (tape.row_normalize(v, 1e-12), tape.row_normalize(codes, 1e-12))
    } else {
        (v, codes)
    };
    // assignment on current values, outside the gradient path
    let vt = tape.to_tensor(v_n);
    let ct = tape.to_tensor(codes_n);
    let cb = Codebook::new(ct, false); // rows already normalized if requested
    let mut indices = Vec::with_capacity(vt.rows());
    for i in 0..vt.rows() {
        indices.push(nearest_code(vt.row(i), &cb)?);
    }
    let q = tape.gather_rows(codes_n, &indices)?;
    let q_sg = tape.detach(q);
    let v_sg = tape.detach(v_n);
    let commit_raw = tape.mse_loss(v_n, q_sg)?;
    let commit_loss = tape.scale(commit_raw, beta);
    let codebook_loss = tape.mse_loss(q, v_sg)?;
    let quantized = tape.straight_through(v_n, q)?;
    Ok(QuantizeNodes { indices, quantized, commit_loss, codebook_loss })
}

/// Usage histogram and perplexity (exp entropy) of an index batch.
pub fn codebook_usage(indices: &[usize], k: usize) -> Result<(Vec<u64>, f64)> {
    let mut hist = vec![0u64; k];
    for &i in indices {
        if i >= k {
            return Err(Error::IndexOutOfRange { context: "codebook_usage", index: i, limit: k });
        }
        hist[i] += 1;
    }
    Ok((hist.clone(), perplexity(&hist)))
}

pub fn perplexity(hist: &[u64]) -> f64 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut entropy = 0.0f64;
    for &c in hist {
        if c > 0 {
            let p = c as f64 / total as f64;
            entropy -= p * p.ln();
        }
    }
    entropy.exp()
}

/// Re-seed codes whose usage fell below `threshold` to random rows of
/// `batch`; usage of revived codes is reset.
pub fn revive_dead_codes(
    codebook: &mut Codebook,
    batch: &Tensor,
    threshold: u64,
    rng: &mut Rng,
) -> Result<usize> {
    if batch.rows() < 1 {
        return Err(Error::InvalidArgument("revive_dead_codes needs a nonempty batch".into()));
    }
    if batch.cols() != codebook.dim() {
        return Err(Error::Dimension(format!(
            "batch dim {} vs codebook dim {}",
            batch.cols(),
            codebook.dim()
        )));
    }
    let d = codebook.dim();
    let mut revived = 0;
    for i in 0..codebook.k() {
        if codebook.usage[i] < threshold {
            let src = rng.below(batch.rows());
            let row = batch.row(src).to_vec();
            codebook.codes.data_mut()[i * d..(i + 1) * d].copy_from_slice(&row);
            codebook.usage[i] = 0;
            revived += 1;
        }
    }
    Ok(revived)
}
