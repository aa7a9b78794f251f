//! Finite-difference gradient verification.
//!
//! Any differentiable computation expressed as a [`DiffFn`] can be
//! checked: analytic gradients from the tape against central finite
//! differences, both evaluated on the f64 instantiation of the same
//! operator code.

use crate::error::Result;
use crate::tape::{Real, Tape, TensorId};
use crate::tensor::Tensor;

/// Central-difference step. 1e-3 balances truncation against round-off
/// for the f64 evaluation path.
pub const FD_STEP: f64 = 1e-3;

/// A scalar-valued function buildable on a tape of either precision.
pub trait DiffFn {
    fn eval<F: Real>(&self, tape: &mut Tape<F>, inputs: &[TensorId]) -> Result<TensorId>;
}

pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} (tol {:.1e}) at input {} elem {}",
            if self.pass { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.tol,
            self.worst.0,
            self.worst.1
        )
    }
}

fn eval_f64<D: DiffFn>(f: &D, inputs: &[Vec<f64>], shapes: &[Vec<usize>]) -> Result<f64> {
    let mut tape: Tape<f64> = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .zip(shapes)
        .map(|(data, shape)| tape.leaf_raw(shape.clone(), data.clone(), false))
        .collect();
    let out = f.eval(&mut tape, &ids)?;
    Ok(tape.scalar_value(out))
}

/// Check analytic gradients of `f` at `inputs` against central finite
/// differences. All inputs are treated as differentiable.
pub fn grad_check<D: DiffFn>(f: &D, inputs: &[Tensor], tol: f64) -> Result<GradCheckReport> {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let base: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&x| x as f64).collect())
        .collect();

    // analytic gradients on the f64 tape
    let mut tape: Tape<f64> = Tape::new();
    let ids: Vec<TensorId> = base
        .iter()
        .zip(&shapes)
        .map(|(data, shape)| tape.leaf_raw(shape.clone(), data.clone(), true))
        .collect();
    let out = f.eval(&mut tape, &ids)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad_or_zero(id)).collect();

    let mut max_rel = 0.0f64;
    let mut worst = (0, 0);
    for (ti, data) in base.iter().enumerate() {
        for ei in 0..data.len() {
            let mut plus = base.clone();
            plus[ti][ei] += FD_STEP;
            let mut minus = base.clone();
            minus[ti][ei] -= FD_STEP;
            let fd = (eval_f64(f, &plus, &shapes)? - eval_f64(f, &minus, &shapes)?) / (2.0 * FD_STEP);
            let an = analytic[ti][ei];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
                worst = (ti, ei);
            }
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, tol, pass: max_rel < tol, worst })
}

// ── standard suite ──────────────────────────────────────────────────

/// Run [`grad_check`] for every differentiable operator and the full
/// Enc-Dec distillation stack, each over three seeded shapes. Returns
/// (name, report) pairs; used by the acceptance gate and the CLI.
pub fn grad_check_suite(tol: f64) -> Result<Vec<(String, GradCheckReport)>> {
    use crate::base_tokenizer::BaseConfig;
    use crate::distill::{DecodeHead, DistillConfig};
    use crate::optim::ParamStore;
    use crate::rng::Rng;

    // Every op wrapped as a scalar-valued DiffFn. Inputs are drawn with
    // magnitudes that keep relu/abs kinks and quantization boundaries
    // away from the finite-difference step.
    struct OpFn(&'static str);
    impl DiffFn for OpFn {
        fn eval<F: Real>(&self, tape: &mut Tape<F>, x: &[TensorId]) -> Result<TensorId> {
            let out = match self.0 {
                "matmul" => tape.matmul(x[0], x[1])?,
                "add" => tape.add(x[0], x[1])?,
                "sub" => tape.sub(x[0], x[1])?,
                "mul" => tape.mul(x[0], x[1])?,
                "scale" => tape.scale(x[0], 1.7),
                "add_row" => tape.add_row(x[0], x[1])?,
                "relu" => {
                    // shift inputs away from the kink
                    let y = tape.scale(x[0], 0.25);
                    tape.relu(y)
                }
                "sigmoid" => tape.sigmoid(x[0]),
                "softmax" => tape.softmax(x[0]),
                "layer_norm" => tape.layer_norm(x[0], x[1], x[2], 1e-5)?,
                "attention" => tape.attention(x[0], x[1], x[2], 2, None)?,
                "row_normalize" => tape.row_normalize(x[0], 1e-12),
                "plumbing" => {
                    // concat → slice → select → scatter → gather-free chain
                    let c = tape.concat_rows(x[0], x[1])?;
                    let s = tape.slice_rows(c, 1, 3)?;
                    let sel = tape.select_rows(s, &[2, 0, 1])?;
                    tape.scatter_rows(c, sel, &[0, 2, 4])?
                }
                "straight_through" => {
                    // FD cannot see the estimator's gradient rerouting
                    // directly, so check the case where it is exact:
                    // q = v + const makes forward = v + const, and the
                    // pass-through gradient to v is the true gradient.
                    let off = tape.constant(&crate::tensor::Tensor::full(
                        tape.shape(x[0]).to_vec(),
                        0.5,
                    ));
                    let q = tape.add(x[0], off)?;
                    tape.straight_through(x[0], q)?
                }
                "mse_loss" => return tape.mse_loss(x[0], x[1]),
                "l1_loss" => {
                    // keep |a-b| away from zero: b is shifted
                    let shifted = tape.scale(x[1], 3.0);
                    let off = tape.constant(&crate::tensor::Tensor::full(
                        tape.shape(x[0]).to_vec(),
                        5.0,
                    ));
                    let far = tape.add(shifted, off)?;
                    return tape.l1_loss(x[0], far);
                }
                "cross_entropy" => {
                    return tape.cross_entropy_smoothed(x[0], &[1, 0, 2, 1], 0.1)
                }
                other => panic!("unknown op {other}"),
            };
            Ok(tape.mean(out))
        }
    }

    let shapes: &[(&str, Vec<Vec<usize>>)] = &[
        ("matmul", vec![vec![3, 4], vec![4, 2]]),
        ("add", vec![vec![3, 4], vec![3, 4]]),
        ("sub", vec![vec![3, 4], vec![3, 4]]),
        ("mul", vec![vec![3, 4], vec![3, 4]]),
        ("scale", vec![vec![3, 4]]),
        ("add_row", vec![vec![3, 4], vec![4]]),
        ("relu", vec![vec![3, 4]]),
        ("sigmoid", vec![vec![3, 4]]),
        ("softmax", vec![vec![3, 4]]),
        ("layer_norm", vec![vec![3, 4], vec![4], vec![4]]),
        ("attention", vec![vec![3, 4], vec![3, 4], vec![3, 4]]),
        ("row_normalize", vec![vec![3, 4]]),
        ("plumbing", vec![vec![3, 2], vec![3, 2]]),
        ("straight_through", vec![vec![3, 4], vec![3, 4]]),
        ("mse_loss", vec![vec![3, 4], vec![3, 4]]),
        ("l1_loss", vec![vec![3, 4], vec![3, 4]]),
        ("cross_entropy", vec![vec![4, 5]]),
    ];
    let mut results = Vec::new();
    for (name, input_shapes) in shapes {
        for seed in [1u64, 2, 3] {
            let mut rng = Rng::new(seed * 31 + 7);
            let inputs: Vec<Tensor> = input_shapes
                .iter()
                .map(|s| Tensor::randn(s.clone(), 0.7, &mut rng))
                .collect();
            let report = grad_check(&OpFn(name), &inputs, tol)?;
            results.push((format!("{name}/seed{seed}"), report));
        }
    }

    // Full Enc-Dec distillation stack, differentiated w.r.t. the image
    // token embeddings through a two-iteration recurrence on the
    // continuous latent path. The quantizer is deliberately excluded:
    // its straight-through estimator and stop-gradients define analytic
    // gradients that differ from the finite difference of the forward
    // function by construction, so it is verified at the op level
    // (straight_through, mse_loss) where the semantics are explicit.
    struct StackFn {
        store: ParamStore,
        cfg: DistillConfig,
        indices: Vec<usize>,
    }
    impl DiffFn for StackFn {
        fn eval<F: Real>(&self, tape: &mut Tape<F>, x: &[TensorId]) -> Result<TensorId> {
            use crate::distill;
            let positions: Vec<usize> = (0..self.cfg.k_2d).collect();
            let mut carried: Option<TensorId> = None;
            let mut loss: Option<TensorId> = None;
            for t in 0..2 {
                let fresh: Vec<usize> = (t * self.cfg.atomic..(t + 1) * self.cfg.atomic).collect();
                let new = distill::init_latents(tape, &self.store, &self.cfg, &fresh)?;
                let latents = match carried {
                    Some(prev) => tape.concat_rows(prev, new)?,
                    None => new,
                };
                let slot_ids: Vec<usize> = (0..(t + 1) * self.cfg.atomic).collect();
                let latents =
                    distill::add_latent_positions(tape, &self.store, latents, &slot_ids)?;
                let img = distill::embed_image_tokens(tape, &self.store, x[0], &positions)?;
                let (_, lat_out) =
                    distill::distill_encode(tape, &self.store, &self.cfg, Some(img), latents)?;
                let factored = distill::factorize(tape, &self.store, lat_out)?;
                let defac = distill::defactorize(tape, &self.store, factored)?;
                let (logits, _) = distill::distill_decode(
                    tape,
                    &self.store,
                    &self.cfg,
                    defac,
                    &slot_ids,
                    DecodeHead::TokenLogits,
                )?;
                let ce = tape.cross_entropy_smoothed(logits, &self.indices, 0.1)?;
                loss = Some(match loss {
                    Some(prev) => tape.add(prev, ce)?,
                    None => ce,
                });
                carried = Some(lat_out);
            }
            Ok(tape.scale(loss.unwrap(), 0.5))
        }
    }
    let base = BaseConfig { img: 8, d_2d: 8, k_base: 8, ..Default::default() };
    let mut cfg = DistillConfig::from_base(&base);
    cfg.d_f = 4;
    cfg.k_latent = 8;
    cfg.atomic = 2;
    cfg.iterations = 2;
    cfg.heads = 2;
    for seed in [1u64, 2, 3] {
        let mut rng = Rng::new(seed * 131 + 5);
        let mut store = ParamStore::new();
        crate::distill::init_distill(&mut store, &cfg, &mut rng);
        // Redraw parameters at a larger scale than the training init:
        // at sigma 0.02 the loss is nearly flat in the image embeddings
        // and the check would compare two gradients of ~1e-6 against the
        // 1e-3 denominator floor, passing vacuously.
        let names: Vec<String> = store.names().map(str::to_owned).collect();
        for name in names {
            let shape = store.get(&name).shape().to_vec();
            *store.get_mut(&name) = Tensor::randn(shape, 0.35, &mut rng);
        }
        let indices: Vec<usize> = (0..cfg.k_2d).map(|_| rng.below(cfg.k_base)).collect();
        let f = StackFn { store, cfg, indices };
        let x = Tensor::randn(vec![cfg.k_2d, cfg.d_model], 0.5, &mut rng);
        let report = grad_check(&f, &[x], tol)?;
        results.push((format!("enc_dec_stack/seed{seed}"), report));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    struct SumFn;
    impl DiffFn for SumFn {
        fn eval<F: Real>(&self, tape: &mut Tape<F>, inputs: &[TensorId]) -> Result<TensorId> {
            Ok(tape.sum(inputs[0]))
        }
    }

    struct MatmulChain;
    impl DiffFn for MatmulChain {
        fn eval<F: Real>(&self, tape: &mut Tape<F>, inputs: &[TensorId]) -> Result<TensorId> {
            let h = tape.matmul(inputs[0], inputs[1])?;
            let h = tape.sigmoid(h);
            let h2 = tape.matmul(h, inputs[2])?;
            Ok(tape.mean(h2))
        }
    }

    /// Negative control: sum forward with a deliberately wrong gradient
    /// (mean's backward divides by n; routing sum through scale(2) breaks
    /// the analytic/FD agreement).
    struct WrongScale;
    impl DiffFn for WrongScale {
        fn eval<F: Real>(&self, tape: &mut Tape<F>, inputs: &[TensorId]) -> Result<TensorId> {
            Ok(tape.sum(inputs[0]))
        }
    }

    #[test]
    fn sum_has_zero_error() {
        let mut rng = Rng::new(1);
        let x = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        let r = grad_check(&SumFn, &[x], 1e-3).unwrap();
        assert!(r.pass);
        assert!(r.max_rel_err < 1e-9);
    }

    #[test]
    fn matmul_chain_passes() {
        let mut rng = Rng::new(2);
        let a = Tensor::randn(vec![4, 3], 0.5, &mut rng);
        let b = Tensor::randn(vec![3, 5], 0.5, &mut rng);
        let c = Tensor::randn(vec![5, 2], 0.5, &mut rng);
        let r = grad_check(&MatmulChain, &[a, b, c], 1e-3).unwrap();
        assert!(r.pass, "{r}");
    }

    #[test]
    fn suite_passes_and_is_exhaustive() {
        let results = grad_check_suite(1e-3).unwrap();
        // 17 ops + the Enc-Dec stack, three seeds each
        assert_eq!(results.len(), 18 * 3);
        for (name, report) in &results {
            assert!(report.pass, "{name}: {report}");
        }
    }

    #[test]
    fn negative_control_fails() {
        // compare the analytic grad of sum against FD of 2*sum by hand
        let mut rng = Rng::new(3);
        let x = Tensor::randn(vec![2, 2], 1.0, &mut rng);
        let r = grad_check(&WrongScale, &[x.clone()], 1e-3).unwrap();
        assert!(r.pass); // sanity: the true rule passes
        // now fake a broken backward by checking sum against doubled FD
        let shapes = vec![x.shape().to_vec()];
        let base: Vec<Vec<f64>> = vec![x.data().iter().map(|&v| v as f64).collect()];
        let mut worst = 0.0f64;
        for ei in 0..4 {
            let mut plus = base.clone();
            plus[0][ei] += FD_STEP;
            let mut minus = base.clone();
            minus[0][ei] -= FD_STEP;
            let fd = (eval_f64(&WrongScale, &plus, &shapes).unwrap()
                - eval_f64(&WrongScale, &minus, &shapes).unwrap())
                / (2.0 * FD_STEP);
            let wrong_analytic = 2.0; // claimed gradient, true is 1.0
            let rel = (wrong_analytic - fd).abs() / fd.abs().max(1e-3);
            worst = worst.max(rel);
        }
        assert!(worst > 1e-3, "wrong rule must be detected, err {worst}");
    }
}
