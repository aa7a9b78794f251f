//! Recurrent rollout controller: grows latent memory by `atomic` fresh
//! slots each iteration, optionally halts already-reconstructed image
//! tokens out of the encoder input, and records the trace. The whole
//! unroll lives on one tape so stage-1 training backpropagates through
//! every iteration.

use crate::base_tokenizer::{self, BaseConfig, TokenGrid};
use crate::distill::{self, DecodeHead, DistillConfig, LatentSequence};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tape::{Real, Tape, TensorId};
use crate::tensor::Tensor;

/// Latent token budget after iteration `t` (1-based): `atomic * t`.
pub fn token_schedule(t: usize, cfg: &DistillConfig) -> Result<usize> {
    if t < 1 || t > cfg.iterations {
        return Err(Error::InvalidArgument(format!(
            "iteration {t} outside 1..={}",
            cfg.iterations
        )));
    }
    Ok(cfg.atomic * t)
}

/// Halting policy for image tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HaltingPolicy {
    /// Token i is halted when argmax(logits_i) equals its original index.
    ArgmaxMatch,
    Disabled,
}

/// Active-token mask from the latest reconstruction: `true` means the
/// token stays in the encoder input.
pub fn halting_mask(
    recon_logits: &Tensor,
    original_indices: &[usize],
    policy: HaltingPolicy,
) -> Result<Vec<bool>> {
    if recon_logits.rows() != original_indices.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows vs {} indices",
            recon_logits.rows(),
            original_indices.len()
        )));
    }
    match policy {
        HaltingPolicy::Disabled => Ok(vec![true; original_indices.len()]),
        HaltingPolicy::ArgmaxMatch => Ok(original_indices
            .iter()
            .enumerate()
            .map(|(i, &orig)| argmax(recon_logits.row(i)) != orig)
            .collect()),
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// When the decoder readout runs during a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeSchedule {
    /// Stage 1 / tracing: decode after every iteration.
    EveryIteration,
    /// Stage 2: run only the encoder recurrence, decode once at the end.
    FinalOnly,
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutOptions {
    pub iterations: usize,
    pub policy: HaltingPolicy,
    pub schedule: DecodeSchedule,
    pub head: DecodeHead,
    /// Commitment weight passed to the quantizer.
    pub beta: f64,
    /// When false the decoder consumes continuous factored latents and
    /// the quantizer losses are zero (stage-1 warmup). Codebook indices
    /// are still reported (nearest code, no gradient) for tracing.
    pub quantize: bool,
}

/// Tape nodes recorded for one iteration of the unrolled graph.
pub struct IterNodes {
    /// 1-based iteration number.
    pub t: usize,
    pub slot_ids: Vec<usize>,
    /// Latent codebook indices chosen this iteration.
    pub latent_indices: Vec<usize>,
    /// Continuous encoder output for the latents (carried forward).
    pub latent_tokens: TensorId,
    /// Normalized factored latents before quantization.
    pub factored: TensorId,
    /// Defactorized quantized latents (decoder input).
    pub quantized_tokens: TensorId,
    pub commit_loss: TensorId,
    pub codebook_loss: TensorId,
    /// Decoder readout (per [`DecodeSchedule`]), logits or embeddings.
    pub readout: Option<TensorId>,
    /// Smoothed CE against the original indices (TokenLogits head only).
    pub token_ce: Option<TensorId>,
    pub decoder_attns: Vec<TensorId>,
    /// Which image tokens entered the encoder this iteration.
    pub active: Vec<bool>,
}

impl IterNodes {
    pub fn halted_count(&self) -> usize {
        self.active.iter().filter(|&&a| !a).count()
    }
}

/// The full unrolled rollout graph.
pub struct RolloutGraph {
    pub iters: Vec<IterNodes>,
    /// Full image-token sequence after the last encoder pass.
    pub final_image_tokens: TensorId,
    /// Continuous latent tokens after the last encoder pass.
    pub final_latents: TensorId,
}

/// Label-smoothing epsilon for stage-1 token supervision.
pub const CE_EPSILON: f64 = 0.1;

/// Build the unrolled rollout graph for one image on the given tape,
/// starting from materialized (gradient-free) token embeddings.
pub fn rollout_on_tape<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore,
    cfg: &DistillConfig,
    grid: &TokenGrid,
    opts: &RolloutOptions,
) -> Result<RolloutGraph> {
    let img_leaf = tape.leaf(&grid.embeddings, false);
    rollout_graph(tape, store, cfg, img_leaf, &grid.indices, opts)
}

/// Build the unrolled rollout graph from tape-resident image token
/// embeddings, so stage 2 can backpropagate into the base encoder.
pub fn rollout_graph<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore,
    cfg: &DistillConfig,
    embeddings: TensorId,
    indices: &[usize],
    opts: &RolloutOptions,
) -> Result<RolloutGraph> {
    if opts.iterations < 1 || opts.iterations > cfg.iterations {
        return Err(Error::InvalidArgument(format!(
            "rollout length {} outside 1..={}",
            opts.iterations, cfg.iterations
        )));
    }
    if indices.len() != cfg.k_2d || tape.shape(embeddings)[0] != cfg.k_2d {
        return Err(Error::Dimension(format!(
            "{} grid indices vs k_2d {}",
            indices.len(),
            cfg.k_2d
        )));
    }
    // Carried values are position-free; pos2d/pos1d are re-added at
    // every encoder entry so the recurrence cannot smooth away token
    // identity. Halted rows keep their last carried value.
    let mut img_full = embeddings;
    let mut carried: Option<TensorId> = None;
    let mut slot_ids: Vec<usize> = Vec::new();
    let mut active = vec![true; cfg.k_2d];
    let mut iters = Vec::with_capacity(opts.iterations);
    let mut final_latents = None;
    for t in 1..=opts.iterations {
        // append-only fresh slots
        let fresh_slots: Vec<usize> = ((t - 1) * cfg.atomic..t * cfg.atomic).collect();
        let fresh = distill::init_latents(tape, store, cfg, &fresh_slots)?;
        let latents = match carried {
            Some(prev) => tape.concat_rows(prev, fresh)?,
            None => fresh,
        };
        slot_ids.extend_from_slice(&fresh_slots);
        let latents = distill::add_latent_positions(tape, store, latents, &slot_ids)?;
        let active_positions: Vec<usize> =
            (0..cfg.k_2d).filter(|&i| active[i]).collect();
        let img_in = if active_positions.is_empty() {
            None
        } else {
            let rows = tape.select_rows(img_full, &active_positions)?;
            Some(distill::embed_image_tokens(tape, store, rows, &active_positions)?)
        };
        let (img_out, lat_out) = distill::distill_encode(tape, store, cfg, img_in, latents)?;
        if let Some(img_out) = img_out {
            img_full = tape.scatter_rows(img_full, img_out, &active_positions)?;
        }
        let f = distill::factorize(tape, store, lat_out)?;
        let (q_tokens, latent_indices, commit_loss, codebook_loss) = if opts.quantize {
            let codes = crate::nn::bind(tape, store, "latent_codebook.codes");
            let q = crate::quantizer::quantize_on_tape(tape, f, codes, true, opts.beta)?;
            let tokens = distill::defactorize(tape, store, q.quantized)?;
            (tokens, q.indices, q.commit_loss, q.codebook_loss)
        } else {
            // warmup: decode the continuous factored latents; indices are
            // reported for tracing but carry no gradient
            let tokens = distill::defactorize(tape, store, f)?;
            let ft = tape.to_tensor(f);
            let cb = crate::quantizer::Codebook::new(
                store.get("latent_codebook.codes").clone(),
                true,
            );
            let indices = (0..ft.rows())
                .map(|i| crate::quantizer::nearest_code(ft.row(i), &cb))
                .collect::<Result<Vec<_>>>()?;
            let f_sg = tape.detach(f);
            let zero = tape.mse_loss(f_sg, f_sg)?;
            (tokens, indices, zero, zero)
        };
        let decode_now = matches!(opts.schedule, DecodeSchedule::EveryIteration)
            || t == opts.iterations;
        let (readout, token_ce, attns) = if decode_now {
            let (r, attns) = distill::distill_decode(tape, store, cfg, q_tokens, &slot_ids, opts.head)?;
            let ce = match opts.head {
                DecodeHead::TokenLogits => {
                    Some(tape.cross_entropy_smoothed(r, indices, CE_EPSILON)?)
                }
                DecodeHead::PixelEmbeddings => None,
            };
            (Some(r), ce, attns)
        } else {
            (None, None, Vec::new())
        };
        iters.push(IterNodes {
            t,
            slot_ids: slot_ids.clone(),
            latent_indices,
            latent_tokens: lat_out,
            factored: f,
            quantized_tokens: q_tokens,
            commit_loss,
            codebook_loss,
            readout,
            token_ce,
            decoder_attns: attns,
            active: active.clone(),
        });
        // fresh (non-sticky) mask for the next iteration, from the
        // current reconstruction when one exists
        if t < opts.iterations {
            if let (HaltingPolicy::ArgmaxMatch, Some(r)) =
                (opts.policy, iters.last().unwrap().readout)
            {
                if opts.head == DecodeHead::TokenLogits {
                    let logits = tape.to_tensor(r);
                    active = halting_mask(&logits, indices, opts.policy)?;
                }
            }
        }
        carried = Some(lat_out);
        final_latents = Some(lat_out);
    }
    Ok(RolloutGraph {
        iters,
        final_image_tokens: img_full,
        final_latents: final_latents.expect("at least one iteration"),
    })
}

/// One materialized iteration of a [`RolloutTrace`].
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub t: usize,
    pub token_count: usize,
    pub latents: LatentSequence,
    pub logits: Tensor,
    pub token_ce: f32,
    pub pixel_l1: Option<f32>,
    pub halted_count: usize,
    pub active: Vec<bool>,
}

/// Full inference trace of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutTrace {
    pub iterations: Vec<IterationRecord>,
}

impl RolloutTrace {
    /// CSV rows in the trace interchange format.
    pub fn to_csv(&self, image_id: usize) -> String {
        let mut out = String::new();
        for it in &self.iterations {
            let l1 = it.pixel_l1.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{image_id},{},{},{:.6},{l1},{}\n",
                it.t, it.token_count, it.token_ce, it.halted_count
            ));
        }
        out
    }

    pub const CSV_HEADER: &'static str =
        "image_id,iteration,token_count,token_ce,pixel_l1,halted_count";
}

/// Run a full trace for one image. When `image` is given, each
/// iteration's latents are additionally decoded through the stage-2
/// pixel path and scored with mean per-pixel L1.
pub fn run_rollout(
    store: &ParamStore,
    base_cfg: &BaseConfig,
    cfg: &DistillConfig,
    grid: &TokenGrid,
    t: usize,
    policy: HaltingPolicy,
    image: Option<&Tensor>,
) -> Result<RolloutTrace> {
    let mut tape: Tape<f32> = Tape::new();
    let opts = RolloutOptions {
        iterations: t,
        policy,
        schedule: DecodeSchedule::EveryIteration,
        head: DecodeHead::TokenLogits,
        beta: 0.25,
        quantize: true,
    };
    let graph = rollout_on_tape(&mut tape, store, cfg, grid, &opts)?;
    let mut trace = RolloutTrace::default();
    for it in &graph.iters {
        let pixel_l1 = match image {
            Some(im) => Some(decode_pixels_l1(store, base_cfg, cfg, &mut tape, it, im)?),
            None => None,
        };
        trace.iterations.push(IterationRecord {
            t: it.t,
            token_count: token_schedule(it.t, cfg)?,
            latents: LatentSequence {
                tokens: tape.to_tensor(it.quantized_tokens),
                factored: tape.to_tensor(it.factored),
                indices: it.latent_indices.clone(),
                slot_ids: it.slot_ids.clone(),
            },
            logits: tape.to_tensor(it.readout.expect("EveryIteration decodes each step")),
            token_ce: tape.scalar_value(it.token_ce.expect("TokenLogits head")),
            pixel_l1,
            halted_count: it.halted_count(),
            active: it.active.clone(),
        });
    }
    Ok(trace)
}

/// Decode one iteration's quantized latents through the pixel path and
/// compare to the source image.
fn decode_pixels_l1(
    store: &ParamStore,
    base_cfg: &BaseConfig,
    cfg: &DistillConfig,
    tape: &mut Tape<f32>,
    it: &IterNodes,
    image: &Tensor,
) -> Result<f32> {
    let (emb, _) = distill::distill_decode(
        tape,
        store,
        cfg,
        it.quantized_tokens,
        &it.slot_ids,
        DecodeHead::PixelEmbeddings,
    )?;
    let recon = base_tokenizer::decode_embeddings(tape, store, base_cfg, emb)?;
    Ok(base_tokenizer::pixel_l1(&recon, image))
}

/// Decode previously stored latent codebook indices (e.g. from a
/// bitstream) straight to pixels. Slot ids are implicit: indices fill
/// slots `0..m` in order.
pub fn decode_latent_indices(
    store: &ParamStore,
    base_cfg: &BaseConfig,
    cfg: &DistillConfig,
    indices: &[usize],
) -> Result<Tensor> {
    if indices.is_empty() || indices.len() > cfg.max_tokens() {
        return Err(Error::InvalidArgument(format!(
            "latent count {} outside 1..={}",
            indices.len(),
            cfg.max_tokens()
        )));
    }
    let mut tape: Tape<f32> = Tape::new();
    let codes = crate::nn::bind(&mut tape, store, "latent_codebook.codes");
    let codes_n = tape.row_normalize(codes, 1e-12);
    let factored = tape.gather_rows(codes_n, indices)?;
    let tokens = distill::defactorize(&mut tape, store, factored)?;
    let slot_ids: Vec<usize> = (0..indices.len()).collect();
    let (emb, _) =
        distill::distill_decode(&mut tape, store, cfg, tokens, &slot_ids, DecodeHead::PixelEmbeddings)?;
    base_tokenizer::decode_embeddings(&mut tape, store, base_cfg, emb)
}

/// Adaptive encoding: run the rollout and stop at the first iteration
/// whose pixel reconstruction L1 beats `tsc_threshold`, falling back
/// to the maximum budget. Returns that iteration's latents and the
/// iteration count used.
pub fn encode_adaptive(
    store: &ParamStore,
    base_cfg: &BaseConfig,
    cfg: &DistillConfig,
    grid: &TokenGrid,
    image: &Tensor,
    tsc_threshold: f32,
) -> Result<(LatentSequence, usize)> {
    let trace = run_rollout(
        store,
        base_cfg,
        cfg,
        grid,
        cfg.iterations,
        HaltingPolicy::Disabled,
        Some(image),
    )?;
    for it in &trace.iterations {
        if it.pixel_l1.expect("image provided") < tsc_threshold {
            return Ok((it.latents.clone(), it.t));
        }
    }
    let last = trace.iterations.last().expect("iterations >= 1");
    Ok((last.latents.clone(), last.t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_tokenizer::init_base;
    use crate::distill::init_distill;
    use crate::rng::Rng;

    fn setup() -> (BaseConfig, DistillConfig, ParamStore, Rng) {
        let base = BaseConfig::default();
        let cfg = DistillConfig::from_base(&base);
        let mut rng = Rng::new(21);
        let mut store = ParamStore::new();
        init_base(&mut store, &base, &mut rng);
        init_distill(&mut store, &cfg, &mut rng);
        (base, cfg, store, rng)
    }

    fn random_image(rng: &mut Rng) -> Tensor {
        let mut t = Tensor::randn(vec![32, 32, 3], 0.2, rng);
        for v in t.data_mut() {
            *v = (*v + 0.5).clamp(0.0, 1.0);
        }
        t
    }

    #[test]
    fn schedule_arithmetic() {
        let base = BaseConfig::default();
        let mut cfg = DistillConfig::from_base(&base);
        cfg.atomic = 32; // full-scale schedule: 32 in the 1st, 256 in the 8th
        assert_eq!(token_schedule(1, &cfg).unwrap(), 32);
        assert_eq!(token_schedule(8, &cfg).unwrap(), 256);
        cfg.atomic = 8;
        assert_eq!(token_schedule(3, &cfg).unwrap(), 24);
        assert!(token_schedule(0, &cfg).is_err());
        assert!(token_schedule(9, &cfg).is_err());
    }

    #[test]
    fn halting_mask_policies() {
        // perfect reconstruction → all halted
        let logits = Tensor::new(vec![2, 3], vec![5.0, 0.0, 0.0, 0.0, 5.0, 0.0]).unwrap();
        let m = halting_mask(&logits, &[0, 1], HaltingPolicy::ArgmaxMatch).unwrap();
        assert_eq!(m, vec![false, false]);
        // disabled → all active
        let m = halting_mask(&logits, &[0, 1], HaltingPolicy::Disabled).unwrap();
        assert_eq!(m, vec![true, true]);
        // mismatch stays active
        let m = halting_mask(&logits, &[1, 1], HaltingPolicy::ArgmaxMatch).unwrap();
        assert_eq!(m, vec![true, false]);
        assert!(halting_mask(&logits, &[0], HaltingPolicy::ArgmaxMatch).is_err());
    }

    #[test]
    fn random_logits_large_k_leave_all_active() {
        let mut rng = Rng::new(99);
        let logits = Tensor::randn(vec![64, 512], 1.0, &mut rng);
        let orig: Vec<usize> = (0..64).map(|_| rng.below(512)).collect();
        let m = halting_mask(&logits, &orig, HaltingPolicy::ArgmaxMatch).unwrap();
        assert!(m.iter().all(|&a| a), "seeded fixture: no accidental argmax match");
    }

    #[test]
    fn trace_follows_schedule_and_appends_slots() {
        let (base, cfg, store, mut rng) = setup();
        let im = random_image(&mut rng);
        let grid = base_tokenizer::encode_image(&store, &base, &im).unwrap();
        let trace =
            run_rollout(&store, &base, &cfg, &grid, 8, HaltingPolicy::ArgmaxMatch, None).unwrap();
        assert_eq!(trace.iterations.len(), 8);
        for (i, it) in trace.iterations.iter().enumerate() {
            let t = i + 1;
            assert_eq!(it.token_count, cfg.atomic * t);
            assert_eq!(it.latents.len(), cfg.atomic * t);
            // slots append-only: prefix extension of the previous iteration
            let want: Vec<usize> = (0..cfg.atomic * t).collect();
            assert_eq!(it.latents.slot_ids, want);
            // decoder predicts all positions regardless of halting
            assert_eq!(it.logits.shape(), &[cfg.k_2d, cfg.k_base]);
        }
    }

    #[test]
    fn t1_equals_single_step_distillation_and_trace_is_deterministic() {
        let (base, cfg, store, mut rng) = setup();
        let im = random_image(&mut rng);
        let grid = base_tokenizer::encode_image(&store, &base, &im).unwrap();
        let t8 = run_rollout(&store, &base, &cfg, &grid, 8, HaltingPolicy::Disabled, None).unwrap();
        let t1 = run_rollout(&store, &base, &cfg, &grid, 1, HaltingPolicy::Disabled, None).unwrap();
        assert_eq!(t1.iterations.len(), 1);
        // iteration 1 of the long rollout is exactly the single-step run
        assert_eq!(t1.iterations[0], t8.iterations[0]);
        let again =
            run_rollout(&store, &base, &cfg, &grid, 8, HaltingPolicy::Disabled, None).unwrap();
        assert_eq!(t8, again);
    }

    #[test]
    fn rollout_rejects_bad_t() {
        let (base, cfg, store, mut rng) = setup();
        let im = random_image(&mut rng);
        let grid = base_tokenizer::encode_image(&store, &base, &im).unwrap();
        assert!(run_rollout(&store, &base, &cfg, &grid, 0, HaltingPolicy::Disabled, None).is_err());
        assert!(run_rollout(&store, &base, &cfg, &grid, 9, HaltingPolicy::Disabled, None).is_err());
    }

    #[test]
    fn adaptive_encoding_thresholds() {
        let (base, cfg, store, mut rng) = setup();
        let im = random_image(&mut rng);
        let grid = base_tokenizer::encode_image(&store, &base, &im).unwrap();
        let (lat, used) =
            encode_adaptive(&store, &base, &cfg, &grid, &im, f32::INFINITY).unwrap();
        assert_eq!(used, 1);
        assert_eq!(lat.len(), cfg.atomic);
        let (lat, used) = encode_adaptive(&store, &base, &cfg, &grid, &im, 0.0).unwrap();
        assert_eq!(used, cfg.iterations);
        assert_eq!(lat.len(), cfg.max_tokens());
        // monotone in the threshold
        let (_, t_loose) = encode_adaptive(&store, &base, &cfg, &grid, &im, 0.5).unwrap();
        let (_, t_tight) = encode_adaptive(&store, &base, &cfg, &grid, &im, 0.05).unwrap();
        assert!(t_tight >= t_loose);
    }

    #[test]
    fn stage1_gradient_reaches_last_iterations_fresh_slots() {
        let (_, cfg, store, mut rng) = setup();
        let grid = TokenGrid {
            indices: (0..cfg.k_2d).map(|_| rng.below(cfg.k_base)).collect(),
            embeddings: Tensor::randn(vec![cfg.k_2d, cfg.d_model], 0.5, &mut rng),
        };
        let mut tape: Tape<f32> = Tape::new();
        let opts = RolloutOptions {
            iterations: 3,
            policy: HaltingPolicy::Disabled,
            schedule: DecodeSchedule::EveryIteration,
            head: DecodeHead::TokenLogits,
            beta: 0.25,
            quantize: true,
        };
        let graph = rollout_on_tape(&mut tape, &store, &cfg, &grid, &opts).unwrap();
        // mean CE over iterations, like stage 1
        let mut loss = graph.iters[0].token_ce.unwrap();
        for it in &graph.iters[1..] {
            loss = tape.add(loss, it.token_ce.unwrap()).unwrap();
        }
        let loss = tape.scale(loss, 1.0 / 3.0);
        tape.backward(loss).unwrap();
        let mut init_grad: Option<Vec<f32>> = None;
        tape.export_grads(1.0, |name, g| {
            if name == "distill.init" {
                let acc = init_grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        });
        let g = init_grad.expect("init embeddings receive gradient");
        let d = cfg.d_model;
        // used slots (0..3*atomic) get nonzero grads, unused slots zero
        let used = 3 * cfg.atomic;
        let used_norm: f32 = g[..used * d].iter().map(|v| v * v).sum();
        let unused_norm: f32 = g[used * d..].iter().map(|v| v * v).sum();
        assert!(used_norm > 0.0);
        assert_eq!(unused_norm, 0.0);
        // last iteration's fresh slots specifically
        let last_fresh: f32 =
            g[2 * cfg.atomic * d..3 * cfg.atomic * d].iter().map(|v| v * v).sum();
        assert!(last_fresh > 0.0, "end-to-end gradient through the whole unroll");
    }

    #[test]
    fn decode_latent_indices_shapes() {
        let (base, cfg, store, mut rng) = setup();
        let indices: Vec<usize> = (0..16).map(|_| rng.below(cfg.k_latent)).collect();
        let im = decode_latent_indices(&store, &base, &cfg, &indices).unwrap();
        assert_eq!(im.shape(), &[32, 32, 3]);
        assert!(decode_latent_indices(&store, &base, &cfg, &[]).is_err());
        assert!(decode_latent_indices(&store, &base, &cfg, &vec![0; 65]).is_err());
    }
}
