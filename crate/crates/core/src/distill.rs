//! One iteration of 2D→1D→2D latent distillation.
//!
//! The encoder runs joint self-attention over `[image tokens ; latent
//! tokens]` and returns both halves updated. Latents are factorized to
//! a small dimension, L2-normalized, quantized against the shared 1D
//! codebook, and defactorized. The decoder runs over `[mask tokens ;
//! latents]` and reads out the mask positions — as logits over the
//! base codebook in stage 1, or as 2D embeddings for the pixel path in
//! stage 2. The same parameters serve every rollout iteration.

use crate::base_tokenizer::BaseConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::optim::ParamStore;
use crate::quantizer::{self, QuantizeNodes};
use crate::rng::Rng;
use crate::tape::{Real, Tape, TensorId};
use crate::tensor::Tensor;

/// Shape of the distillation stack. `d_model` equals the base
/// tokenizer's `d_2d` so image token embeddings enter the encoder
/// without an input projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub d_model: usize,
    /// Factorized latent dimension fed to the 1D codebook.
    pub d_f: usize,
    pub k_latent: usize,
    /// Fresh latent slots appended per rollout iteration.
    pub atomic: usize,
    pub iterations: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub heads: usize,
    /// Number of 2D grid positions (K_2D), from the base tokenizer.
    pub k_2d: usize,
    /// Base codebook size, the stage-1 supervision vocabulary.
    pub k_base: usize,
}

impl DistillConfig {
    pub fn from_base(base: &BaseConfig) -> Self {
        DistillConfig {
            d_model: base.d_2d,
            d_f: 12,
            k_latent: 256,
            atomic: 8,
            iterations: 8,
            enc_depth: 2,
            dec_depth: 2,
            heads: 4,
            k_2d: base.tokens(),
            k_base: base.k_base,
        }
    }

    /// Largest latent count any rollout can reach.
    pub fn max_tokens(&self) -> usize {
        self.atomic * self.iterations
    }

    fn mlp_hidden(&self) -> usize {
        2 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.atomic < 1 || self.iterations < 1 {
            return Err(Error::InvalidArgument("atomic and iterations must be >= 1".into()));
        }
        if self.d_f < 1 || self.k_latent < 1 {
            return Err(Error::InvalidArgument("d_f and k_latent must be >= 1".into()));
        }
        Ok(())
    }
}

/// Quantized latent tokens of one iteration, materialized for traces
/// and the bitstream codec.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    /// Defactorized latent tokens, `[m, d_model]`.
    pub tokens: Tensor,
    /// Normalized factored latents, `[m, d_f]`.
    pub factored: Tensor,
    /// Indices into the latent codebook.
    pub indices: Vec<usize>,
    /// Global latent slot positions, strictly increasing.
    pub slot_ids: Vec<usize>,
}

impl LatentSequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Create all `distill.*` parameters plus the shared latent codebook.
pub fn init_distill(store: &mut ParamStore, cfg: &DistillConfig, rng: &mut Rng) {
    let d = cfg.d_model;
    store.insert("distill.init", Tensor::randn(vec![cfg.max_tokens(), d], nn::INIT_SIGMA, rng));
    store.insert("distill.mask", Tensor::randn(vec![1, d], nn::INIT_SIGMA, rng));
    store.insert("distill.pos2d", Tensor::randn(vec![cfg.k_2d, d], nn::INIT_SIGMA, rng));
    store.insert("distill.pos1d", Tensor::randn(vec![cfg.max_tokens(), d], nn::INIT_SIGMA, rng));
    store.insert("distill.posmask", Tensor::randn(vec![cfg.k_2d, d], nn::INIT_SIGMA, rng));
    nn::init_stack(store, "distill.enc", cfg.enc_depth, d, cfg.mlp_hidden(), rng);
    nn::init_stack(store, "distill.dec", cfg.dec_depth, d, cfg.mlp_hidden(), rng);
    nn::init_linear(store, "distill.factor", d, cfg.d_f, rng);
    nn::init_linear(store, "distill.defactor", cfg.d_f, d, rng);
    nn::init_linear(store, "distill.head", d, cfg.k_base, rng);
    nn::init_linear(store, "distill.pixel_head", d, d, rng);
    store.insert(
        "latent_codebook.codes",
        Tensor::randn(vec![cfg.k_latent, cfg.d_f], nn::INIT_SIGMA, rng),
    );
}

/// Initial latent tokens for fresh slots: the learned per-slot init
/// embedding. Positions are added separately at every encoder entry
/// via [`add_latent_positions`].
pub fn init_latents<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore,
    cfg: &DistillConfig,
    slots: &[usize],
) -> Result<TensorId> {
    for &s in slots {
        if s >= cfg.max_tokens() {
            return Err(Error::IndexOutOfRange {
                context: "init_latents",
                index: s,
                limit: cfg.max_tokens(),
            });
        }
    }
    let init = nn::bind(tape, store, "distill.init");
    tape.gather_rows(init, slots)
}

/// Add the 1D slot positional embedding to latent tokens. Re-applied
/// at every encoder entry (and at the decoder input): the recurrence
/// otherwise smooths the carried latents toward a common value and
/// slot identity dissolves.
pub fn add_latent_positions<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore,
    latents: TensorId,
    slot_ids: &[usize],
) -> Result<TensorId> {
    let pos = nn::bind(tape, store, "distill.pos1d");
    let p = tape.gather_rows(pos, slot_ids)?;
    tape.add(latents, p)
}

/// Add the 2D positional embedding for the given grid positions to
/// image token embeddings. Like the latent positions, re-applied at
/// every encoder entry to anchor token identity across the recurrence.
pub fn embed_image_tokens<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore,
    embeddings: TensorId,
    positions: &[usize],
) -> Result<TensorId> {
    let pos = nn::bind(tape, store, "distill.pos2d");
    let p = tape.gather_rows(pos, positions)?;
    tape.add(embeddings, p)
}

/// Joint encoder pass: concat `[image tokens ; latents]`, run the
/// encoder stack, split back. `image_tokens` may hold zero rows (all
/// halted); the latents are still processed.
pub fn distill_encode<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore,
    cfg: &DistillConfig,
    image_tokens: Option<TensorId>,
    latents: TensorId,
) -> Result<(Option<TensorId>, TensorId)> {
    let m = tape.shape(latents)[0];
    if m == 0 {
        return Err(Error::InvalidArgument("distill_encode needs at least one latent".into()));
    }
    let (joint, a) = match image_tokens {
        Some(img) => {
            if tape.shape(img)[1] != cfg.d_model {
                return Err(Error::Dimension(format!(
                    "image token dim {} != d_model {}",
                    tape.shape(img)[1],
                    cfg.d_model
                )));
            }
            (tape.concat_rows(img, latents)?, tape.shape(img)[0])
        }
        None => (latents, 0),
    };
    let (out, _) = nn::stack_forward(tape, store, "distill.enc", joint, cfg.enc_depth, cfg.heads)?;
    if a == 0 {
        return Ok((None, out));
    }
    let img = tape.slice_rows(out, 0, a)?;
    let lat = tape.slice_rows(out, a, m)?;
    Ok((Some(img), lat))
}

/// Linear `d_model → d_f` followed by L2 row normalization.
pub fn factorize<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore,
    latents: TensorId,
) -> Result<TensorId> {
    let f = nn::linear(tape, store, "distill.factor", latents)?;
    Ok(tape.row_normalize(f, 1e-12))
}

/// Linear `d_f → d_model`.
pub fn defactorize<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore,
    factored: TensorId,
) -> Result<TensorId> {
    nn::linear(tape, store, "distill.defactor", factored)
}

/// Factorize, quantize against the shared normalized latent codebook,
/// and defactorize, threading straight-through gradients.
pub fn quantize_latents<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore,
    latents: TensorId,
    beta: f64,
) -> Result<(TensorId, QuantizeNodes)> {
    let f = factorize(tape, store, latents)?;
    let codes = nn::bind(tape, store, "latent_codebook.codes");
    let q = quantizer::quantize_on_tape(tape, f, codes, true, beta)?;
    let tokens = defactorize(tape, store, q.quantized)?;
    Ok((tokens, q))
}

/// What the decoder's mask positions are projected to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeHead {
    /// Stage 1: logits over the base codebook, `[k_2d, k_base]`.
    TokenLogits,
    /// Stage 2: embeddings for the base pixel decoder, `[k_2d, d_model]`.
    PixelEmbeddings,
}

/// Decoder pass over `[mask tokens ; latents]`. Always reads out all
/// `k_2d` mask positions regardless of halting. Returns the read-out
/// and each decoder block's attention node for map extraction.
pub fn distill_decode<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore,
    cfg: &DistillConfig,
    latents: TensorId,
    slot_ids: &[usize],
    head: DecodeHead,
) -> Result<(TensorId, Vec<TensorId>)> {
    if tape.shape(latents)[0] == 0 {
        return Err(Error::InvalidArgument("distill_decode needs at least one latent".into()));
    }
    if tape.shape(latents)[0] != slot_ids.len() {
        return Err(Error::Dimension(format!(
            "{} latents vs {} slot ids",
            tape.shape(latents)[0],
            slot_ids.len()
        )));
    }
    let mask = nn::bind(tape, store, "distill.mask");
    let masks = tape.gather_rows(mask, &vec![0; cfg.k_2d])?;
    let posmask = nn::bind(tape, store, "distill.posmask");
    let masks = tape.add(masks, posmask)?;
    let pos1d = nn::bind(tape, store, "distill.pos1d");
    let lat_pos = tape.gather_rows(pos1d, slot_ids)?;
    let lat = tape.add(latents, lat_pos)?;
    let joint = tape.concat_rows(masks, lat)?;
    let (out, attns) =
        nn::stack_forward(tape, store, "distill.dec", joint, cfg.dec_depth, cfg.heads)?;
    let mask_out = tape.slice_rows(out, 0, cfg.k_2d)?;
    let read = match head {
        DecodeHead::TokenLogits => nn::linear(tape, store, "distill.head", mask_out)?,
        DecodeHead::PixelEmbeddings => nn::linear(tape, store, "distill.pixel_head", mask_out)?,
    };
    Ok((read, attns))
}
