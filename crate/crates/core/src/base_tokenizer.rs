//! Trainable toy 2D tokenizer: patchify, transformer-encode, quantize
//! each grid position against a learned base codebook, and decode back
//! to pixels through a sigmoid head. Plays the role a large pretrained
//! VQ tokenizer plays at full scale: the distillation stack consumes
//! its quantized embeddings and is supervised on its indices.

use crate::error::{Error, Result};
use crate::nn;
use crate::optim::{AdamConfig, ParamStore};
use crate::quantizer::{self, Codebook};
use crate::rng::Rng;
use crate::tape::{Real, Tape, TensorId};
use crate::tensor::Tensor;

/// Shape of the base tokenizer. Images are square `[img, img, channels]`
/// in `[0,1]`, split into `patch`-sized squares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseConfig {
    pub img: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_2d: usize,
    pub k_base: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig { img: 32, channels: 3, patch: 4, d_2d: 48, k_base: 512, depth: 2, heads: 4 }
    }
}

impl BaseConfig {
    /// Tokens per side.
    pub fn grid(&self) -> usize {
        self.img / self.patch
    }

    /// Total 2D token count (K_2D).
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    fn mlp_hidden(&self) -> usize {
        2 * self.d_2d
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.img.is_multiple_of(self.patch) {
            return Err(Error::InvalidArgument(format!(
                "patch size {} must divide image size {}",
                self.patch, self.img
            )));
        }
        if self.k_base < 1 || self.d_2d < 1 {
            return Err(Error::InvalidArgument("k_base and d_2d must be >= 1".into()));
        }
        Ok(())
    }
}

/// Discrete tokenization of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    /// Raster-order indices into the base codebook, length K_2D.
    pub indices: Vec<usize>,
    /// Straight-through quantized embeddings, `[K_2D, d_2d]`.
    pub embeddings: Tensor,
}

/// Split `[img, img, channels]` pixels into raster-order patches,
/// row-major within each patch: `[(img/p)^2, p*p*channels]`.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!("patchify wants [h,w,c], got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidArgument(format!("patch size {p} must divide {h}x{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    let base = ((py * p + dy) * w + px * p + dx) * c;
                    out.extend_from_slice(&src[base..base + c]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, p * p * c], out)
}

/// Inverse of [`patchify`] for square images.
pub fn unpatchify(patches: &Tensor, cfg: &BaseConfig) -> Result<Tensor> {
    let (g, p, c) = (cfg.grid(), cfg.patch, cfg.channels);
    if patches.shape() != [g * g, cfg.patch_dim()] {
        return Err(Error::Dimension(format!(
            "unpatchify wants [{}, {}], got {:?}",
            g * g,
            cfg.patch_dim(),
            patches.shape()
        )));
    }
    let mut out = vec![0.0f32; cfg.img * cfg.img * c];
    for py in 0..g {
        for px in 0..g {
            let row = patches.row(py * g + px);
            for dy in 0..p {
                for dx in 0..p {
                    let dst = ((py * p + dy) * cfg.img + px * p + dx) * c;
                    let src = (dy * p + dx) * c;
                    out[dst..dst + c].copy_from_slice(&row[src..src + c]);
                }
            }
        }
    }
    Tensor::new(vec![cfg.img, cfg.img, c], out)
}

/// Create all `base.*` parameters.
pub fn init_base(store: &mut ParamStore, cfg: &BaseConfig, rng: &mut Rng) {
    nn::init_linear(store, "base.embed", cfg.patch_dim(), cfg.d_2d, rng);
    store.insert("base.pos", Tensor::randn(vec![cfg.tokens(), cfg.d_2d], nn::INIT_SIGMA, rng));
    nn::init_stack(store, "base.enc", cfg.depth, cfg.d_2d, cfg.mlp_hidden(), rng);
    store.insert("base.codebook", Tensor::randn(vec![cfg.k_base, cfg.d_2d], nn::INIT_SIGMA, rng));
    nn::init_stack(store, "base.dec", cfg.depth, cfg.d_2d, cfg.mlp_hidden(), rng);
    nn::init_linear(store, "base.out", cfg.d_2d, cfg.patch_dim(), rng);
}

pub fn is_initialized(store: &ParamStore) -> bool {
    store.contains("base.codebook")
}

/// Tape nodes produced by one encode pass.
pub struct BaseEncodeNodes {
    pub indices: Vec<usize>,
    /// Straight-through quantized embeddings `[K_2D, d_2d]`.
    pub embeddings: TensorId,
    /// Continuous encoder output before quantization (code reseeding).
    pub pre_quantized: TensorId,
    pub commit_loss: TensorId,
    pub codebook_loss: TensorId,
}

/// Patch vectors `[K_2D, patch_dim]` → quantized token embeddings.
pub fn encode_on_tape<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore,
    cfg: &BaseConfig,
    patches: TensorId,
    beta: f64,
) -> Result<BaseEncodeNodes> {
    let x = nn::linear(tape, store, "base.embed", patches)?;
    let pos = nn::bind(tape, store, "base.pos");
    let x = tape.add(x, pos)?;
    let (x, _) = nn::stack_forward(tape, store, "base.enc", x, cfg.depth, cfg.heads)?;
    let codes = nn::bind(tape, store, "base.codebook");
    let q = quantizer::quantize_on_tape(tape, x, codes, false, beta)?;
    Ok(BaseEncodeNodes {
        indices: q.indices,
        embeddings: q.quantized,
        pre_quantized: x,
        commit_loss: q.commit_loss,
        codebook_loss: q.codebook_loss,
    })
}

/// Token embeddings `[K_2D, d_2d]` → patch pixel vectors in `[0,1]`.
pub fn decode_on_tape<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore,
    cfg: &BaseConfig,
    embeddings: TensorId,
) -> Result<TensorId> {
    let (x, _) = nn::stack_forward(tape, store, "base.dec", embeddings, cfg.depth, cfg.heads)?;
    let x = nn::linear(tape, store, "base.out", x)?;
    Ok(tape.sigmoid(x))
}

/// Inference-path encode of one image.
pub fn encode_image(store: &ParamStore, cfg: &BaseConfig, image: &Tensor) -> Result<TokenGrid> {
    if !is_initialized(store) {
        return Err(Error::InvalidArgument("base tokenizer weights not loaded".into()));
    }
    let patches = patchify(image, cfg.patch)?;
    let mut tape: Tape<f32> = Tape::new();
    let p = tape.leaf(&patches, false);
    let enc = encode_on_tape(&mut tape, store, cfg, p, 0.25)?;
    Ok(TokenGrid { embeddings: tape.to_tensor(enc.embeddings), indices: enc.indices })
}

/// Inference-path decode of base-codebook indices to an image.
pub fn decode_tokens(store: &ParamStore, cfg: &BaseConfig, indices: &[usize]) -> Result<Tensor> {
    if !is_initialized(store) {
        return Err(Error::InvalidArgument("base tokenizer weights not loaded".into()));
    }
    if indices.len() != cfg.tokens() {
        return Err(Error::Dimension(format!(
            "expected {} indices, got {}",
            cfg.tokens(),
            indices.len()
        )));
    }
    for &i in indices {
        if i >= cfg.k_base {
            return Err(Error::IndexOutOfRange { context: "decode_tokens", index: i, limit: cfg.k_base });
        }
    }
    let mut tape: Tape<f32> = Tape::new();
    let codes = nn::bind(&mut tape, store, "base.codebook");
    let emb = tape.gather_rows(codes, indices)?;
    decode_embeddings(&mut tape, store, cfg, emb)
}

/// Shared tail of the inference decode paths: embeddings → image tensor.
pub fn decode_embeddings<F: Real>(
    tape: &mut Tape<F>,
    store: &ParamStore,
    cfg: &BaseConfig,
    embeddings: TensorId,
) -> Result<Tensor> {
    let out = decode_on_tape(tape, store, cfg, embeddings)?;
    unpatchify(&tape.to_tensor(out), cfg)
}

/// Mean per-pixel L1 between two images of identical shape.
pub fn pixel_l1(a: &Tensor, b: &Tensor) -> f32 {
    debug_assert_eq!(a.shape(), b.shape());
    let n = a.numel().max(1);
    let sum: f64 =
        a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    (sum / n as f64) as f32
}

/// One logged point of the base training curve.
#[derive(Debug, Clone, Copy)]
pub struct BaseLogPoint {
    pub step: usize,
    pub loss: f32,
    pub perplexity: f64,
}

/// Train the base tokenizer on `dataset` (images `[img, img, c]`) by
/// pixel MSE plus the two VQ losses. Returns the loss curve for the
/// `step,loss,perplexity` CSV. Only `base.*` parameters are touched.
pub fn train_base(
    store: &mut ParamStore,
    cfg: &BaseConfig,
    dataset: &[Tensor],
    steps: usize,
    batch: usize,
    adam: &AdamConfig,
    rng: &mut Rng,
) -> Result<Vec<BaseLogPoint>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("train_base needs a nonempty dataset".into()));
    }
    cfg.validate()?;
    let patches: Vec<Tensor> =
        dataset.iter().map(|im| patchify(im, cfg.patch)).collect::<Result<_>>()?;
    let mut log = Vec::new();
    let mut usage = vec![0u64; cfg.k_base];
    let mut log_usage = vec![0u64; cfg.k_base];
    let revive_every = 100;
    for step in 0..steps {
        store.zero_grads();
        let mut loss_sum = 0.0f64;
        let mut batch_rows: Vec<f32> = Vec::new();
        for _ in 0..batch {
            let p = &patches[rng.below(dataset.len())];
            let mut tape: Tape<f32> = Tape::new();
            let pid = tape.leaf(p, false);
            let enc = encode_on_tape(&mut tape, store, cfg, pid, 0.25)?;
            let recon = decode_on_tape(&mut tape, store, cfg, enc.embeddings)?;
            let mse = tape.mse_loss(recon, pid)?;
            let l = tape.add(mse, enc.commit_loss)?;
            let l = tape.add(l, enc.codebook_loss)?;
            tape.backward(l)?;
            loss_sum += tape.scalar_value(l) as f64;
            tape.export_grads(1.0 / batch as f32, |name, g| store.accumulate_grad(name, g));
            for &i in &enc.indices {
                usage[i] += 1;
                log_usage[i] += 1;
            }
            batch_rows.extend_from_slice(tape.to_tensor(enc.pre_quantized).data());
        }
        store.adam_step(adam);
        // step 0 doubles as data-dependent codebook init: codes start at
        // table scale (0.02) far from the encoder's output region, so
        // every unused code is reseeded from live continuous outputs
        if step == 0 || (step + 1) % revive_every == 0 {
            let rows = batch_rows.len() / cfg.d_2d;
            let batch_t = Tensor::new(vec![rows, cfg.d_2d], batch_rows.clone())?;
            let mut cb = Codebook::new(store.get("base.codebook").clone(), false);
            cb.usage = usage.clone();
            quantizer::revive_dead_codes(&mut cb, &batch_t, 1, rng)?;
            *store.get_mut("base.codebook") = cb.codes;
            usage.fill(0);
        }
        if step % 25 == 0 || step + 1 == steps {
            log.push(BaseLogPoint {
                step,
                loss: (loss_sum / batch as f64) as f32,
                perplexity: quantizer::perplexity(&log_usage),
            });
            log_usage.fill(0);
        }
    }
    Ok(log)
}
