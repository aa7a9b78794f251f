//! Two-stage training and checkpointing.
//!
//! Stage 1 (latent-distillation pre-training) freezes the base
//! tokenizer and trains the distillation stack plus latent codebook on
//! smoothed token cross-entropy averaged over all rollout iterations,
//! with dynamic halting on. Stage 2 (full fine-tuning) samples an
//! iteration count per step, runs only the encoder recurrence, decodes
//! once through the pixel path, and trains everything on pixel L1 with
//! halting off.

use std::io::Read as _;
use std::path::{Path, PathBuf};

use crate::base_tokenizer::{self, BaseConfig};
use crate::data::ShapeScene;
use crate::distill::{DecodeHead, DistillConfig};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, ParamStore};
use crate::quantizer::{self, Codebook};
use crate::rng::Rng;
use crate::rollout::{self, DecodeSchedule, HaltingPolicy, RolloutOptions};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Everything a training run needs, parsed from `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    // model shape
    pub img: usize,
    pub patch: usize,
    pub d_2d: usize,
    pub k_base: usize,
    pub base_depth: usize,
    pub heads: usize,
    pub d_f: usize,
    pub k_latent: usize,
    pub atomic: usize,
    pub iterations: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    // optimization
    pub base_steps: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    // loss weights
    pub w_ce: f32,
    pub w_pixel: f32,
    pub beta: f32,
    pub w_codebook: f32,
    /// Stage-1 steps that decode continuous (unquantized) latents
    /// before the codebook is seeded from live encoder outputs and
    /// quantization switches on. Without it the straight-through
    /// estimator locks in the early latent collapse.
    pub quant_warmup: usize,
    /// Dynamic halting during stage 1.
    pub halting: bool,
    // data
    pub dataset: Option<PathBuf>,
    pub dataset_size: usize,
    pub complexity_lo: usize,
    pub complexity_hi: usize,
    /// RNG state carried inside checkpoints; 0 means start from `seed`.
    pub rng_state: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            img: 32,
            patch: 4,
            d_2d: 48,
            k_base: 512,
            base_depth: 2,
            heads: 4,
            d_f: 12,
            k_latent: 256,
            atomic: 8,
            iterations: 8,
            enc_depth: 2,
            dec_depth: 2,
            base_steps: 1200,
            stage1_steps: 3000,
            stage2_steps: 2000,
            batch: 4,
            lr: 1e-3,
            seed: 0,
            w_ce: 1.0,
            w_pixel: 1.0,
            beta: 0.25,
            w_codebook: 1.0,
            quant_warmup: 1200,
            halting: true,
            dataset: None,
            dataset_size: 500,
            complexity_lo: 1,
            complexity_hi: 6,
            rng_state: 0,
        }
    }
}

impl TrainConfig {
    pub fn base_config(&self) -> BaseConfig {
        BaseConfig {
            img: self.img,
            channels: 3,
            patch: self.patch,
            d_2d: self.d_2d,
            k_base: self.k_base,
            depth: self.base_depth,
            heads: self.heads,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            d_model: self.d_2d,
            d_f: self.d_f,
            k_latent: self.k_latent,
            atomic: self.atomic,
            iterations: self.iterations,
            enc_depth: self.enc_depth,
            dec_depth: self.dec_depth,
            heads: self.heads,
            k_2d: self.base_config().tokens(),
            k_base: self.k_base,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.base_config().validate()?;
        self.distill_config().validate()?;
        if self.base_steps < 1 || self.stage1_steps < 1 || self.stage2_steps < 1 {
            return Err(Error::InvalidArgument("step counts must be >= 1".into()));
        }
        if self.batch < 1 || self.dataset_size < 1 {
            return Err(Error::InvalidArgument("batch and dataset_size must be >= 1".into()));
        }
        if self.w_ce < 0.0 || self.w_pixel < 0.0 || self.beta < 0.0 || self.w_codebook < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be >= 0".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::InvalidArgument("lr must be > 0".into()));
        }
        Ok(())
    }

    /// Serialize back to `key = value` text (the checkpoint snapshot).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("img", self.img.to_string());
        kv("patch", self.patch.to_string());
        kv("d_2d", self.d_2d.to_string());
        kv("k_base", self.k_base.to_string());
        kv("base_depth", self.base_depth.to_string());
        kv("heads", self.heads.to_string());
        kv("d_f", self.d_f.to_string());
        kv("k_latent", self.k_latent.to_string());
        kv("atomic", self.atomic.to_string());
        kv("iterations", self.iterations.to_string());
        kv("enc_depth", self.enc_depth.to_string());
        kv("dec_depth", self.dec_depth.to_string());
        kv("base_steps", self.base_steps.to_string());
        kv("stage1_steps", self.stage1_steps.to_string());
        kv("stage2_steps", self.stage2_steps.to_string());
        kv("batch", self.batch.to_string());
        kv("lr", format!("{:e}", self.lr));
        kv("seed", self.seed.to_string());
        kv("w_ce", self.w_ce.to_string());
        kv("w_pixel", self.w_pixel.to_string());
        kv("beta", self.beta.to_string());
        kv("w_codebook", self.w_codebook.to_string());
        kv("quant_warmup", self.quant_warmup.to_string());
        kv("halting", self.halting.to_string());
        if let Some(d) = &self.dataset {
            kv("dataset", d.display().to_string());
        }
        kv("dataset_size", self.dataset_size.to_string());
        kv("complexity_lo", self.complexity_lo.to_string());
        kv("complexity_hi", self.complexity_hi.to_string());
        kv("rng_state", self.rng_state.to_string());
        s
    }
}

/// Parse line-oriented `key = value` text. Blank lines and `#` comments
/// are ignored; unknown keys and malformed values are rejected with
/// their line number. Missing keys keep their defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
            line: line_no,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| Error::Config {
            line: line_no,
            message: format!("invalid {what} value `{value}` for key `{key}`"),
        };
        macro_rules! num {
            ($field:ident, $ty:ty) => {
                cfg.$field = value.parse::<$ty>().map_err(|_| bad(stringify!($ty)))?
            };
        }
        match key {
            "img" => num!(img, usize),
            "patch" => num!(patch, usize),
            "d_2d" => num!(d_2d, usize),
            "k_base" => num!(k_base, usize),
            "base_depth" => num!(base_depth, usize),
            "heads" => num!(heads, usize),
            "d_f" => num!(d_f, usize),
            "k_latent" => num!(k_latent, usize),
            "atomic" => num!(atomic, usize),
            "iterations" => num!(iterations, usize),
            "enc_depth" => num!(enc_depth, usize),
            "dec_depth" => num!(dec_depth, usize),
            "base_steps" => num!(base_steps, usize),
            "stage1_steps" => num!(stage1_steps, usize),
            "stage2_steps" => num!(stage2_steps, usize),
            "batch" => num!(batch, usize),
            "lr" => num!(lr, f32),
            "seed" => num!(seed, u64),
            "w_ce" => num!(w_ce, f32),
            "w_pixel" => num!(w_pixel, f32),
            "beta" => num!(beta, f32),
            "w_codebook" => num!(w_codebook, f32),
            "quant_warmup" => num!(quant_warmup, usize),
            "halting" => num!(halting, bool),
            "dataset" => cfg.dataset = Some(PathBuf::from(value)),
            "dataset_size" => num!(dataset_size, usize),
            "complexity_lo" => num!(complexity_lo, usize),
            "complexity_hi" => num!(complexity_hi, usize),
            "rng_state" => num!(rng_state, u64),
            _ => {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("unknown key `{key}`"),
                })
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config_file(path: &Path) -> Result<TrainConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

// ── checkpoint format ───────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 4] = b"ALIT";
const CKPT_VERSION: u32 = 1;

/// Serialize all parameters (with optimizer moments) plus the config
/// snapshot: magic `ALIT`, u32 version, u32 entry count, per entry
/// (u32 name length, name, u32 rank, u32 dims, little-endian f32
/// payload), then a length-prefixed config text block.
pub fn save_checkpoint(path: &Path, store: &ParamStore, config: &TrainConfig) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let entries = store.export();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("length checked")))
    }
}

/// Load a checkpoint and validate key tensor shapes against its config.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, TrainConfig)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {CKPT_VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("non-UTF8 parameter name".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    let text_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(text_len)?)
        .map_err(|_| Error::Format("non-UTF8 config text".into()))?;
    let config = parse_config(text)?;
    let store = ParamStore::import(&entries)?;
    validate_shapes(&store, &config)?;
    Ok((store, config))
}

/// Check the load-bearing tensors against the config-derived shapes,
/// naming the offending key on mismatch.
fn validate_shapes(store: &ParamStore, cfg: &TrainConfig) -> Result<()> {
    let base = cfg.base_config();
    let dist = cfg.distill_config();
    let expect: &[(&str, Vec<usize>)] = &[
        ("base.codebook", vec![base.k_base, base.d_2d]),
        ("base.embed.w", vec![base.patch_dim(), base.d_2d]),
        ("latent_codebook.codes", vec![dist.k_latent, dist.d_f]),
        ("distill.init", vec![dist.max_tokens(), dist.d_model]),
        ("distill.pos2d", vec![dist.k_2d, dist.d_model]),
        ("distill.head.w", vec![dist.d_model, dist.k_base]),
    ];
    for (key, shape) in expect {
        if !store.contains(key) {
            return Err(Error::Format(format!("checkpoint missing parameter `{key}`")));
        }
        if store.get(key).shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "shape mismatch for `{key}`: checkpoint {:?}, config wants {:?}",
                store.get(key).shape(),
                shape
            )));
        }
    }
    Ok(())
}

// ── metrics ─────────────────────────────────────────────────────────

/// One row of the training metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: u8,
    pub iteration: usize,
    pub token_ce: Option<f32>,
    pub pixel_l1: Option<f32>,
    pub commit: f32,
    pub codebook: f32,
    pub perplexity: f64,
}

pub const METRICS_HEADER: &str = "step,stage,iteration,token_ce,pixel_l1,commit,codebook,perplexity";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f32>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.4}",
            self.step,
            self.stage,
            self.iteration,
            opt(self.token_ce),
            opt(self.pixel_l1),
            self.commit,
            self.codebook,
            self.perplexity
        )
    }
}

const LOG_EVERY: usize = 50;

// ── stage 1 ─────────────────────────────────────────────────────────

/// Latent-distillation pre-training. The base tokenizer is frozen;
/// gradients flow only to `distill.*` and the latent codebook. Returns
/// the metrics rows (one per iteration at each logged step).
pub fn stage1_pretrain(
    store: &mut ParamStore,
    cfg: &TrainConfig,
    scenes: &[ShapeScene],
    rng: &mut Rng,
) -> Result<Vec<MetricsRow>> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("stage 1 needs a nonempty dataset".into()));
    }
    if !base_tokenizer::is_initialized(store) {
        return Err(Error::InvalidArgument("stage 1 needs a trained base checkpoint".into()));
    }
    let base = cfg.base_config();
    let dist = cfg.distill_config();
    store.set_all_trainable(true);
    store.set_trainable_prefix("base.", false);
    let adam = cfg.adam();
    let base_opts = RolloutOptions {
        iterations: dist.iterations,
        policy: if cfg.halting { HaltingPolicy::ArgmaxMatch } else { HaltingPolicy::Disabled },
        schedule: DecodeSchedule::EveryIteration,
        head: DecodeHead::TokenLogits,
        beta: cfg.beta as f64,
        quantize: true,
    };
    let warmup = cfg.quant_warmup.min(cfg.stage1_steps.saturating_sub(1));
    let mut metrics = Vec::new();
    // token grids are frozen along with the base tokenizer: precompute
    let grids: Vec<_> = scenes
        .iter()
        .map(|s| base_tokenizer::encode_image(store, &base, &s.image))
        .collect::<Result<_>>()?;
    // dead-code revival state: usage over a window plus the latest
    // batch of factored latents to re-seed collapsed codes from
    let revive_every = 100;
    let mut window_usage = vec![0u64; dist.k_latent];
    let mut factored_rows: Vec<f32> = Vec::new();
    for step in 0..cfg.stage1_steps {
        // end of warmup: seed the codebook from live factored latents so
        // every code starts inside the encoder's actual output region
        if step == warmup && warmup > 0 && !factored_rows.is_empty() {
            let rows = factored_rows.len() / dist.d_f;
            let batch_t = Tensor::new(vec![rows, dist.d_f], factored_rows.clone())?;
            let mut cb = Codebook::new(store.get("latent_codebook.codes").clone(), true);
            quantizer::revive_dead_codes(&mut cb, &batch_t, 1, rng)?; // usage all 0: reseed every code
            *store.get_mut("latent_codebook.codes") = cb.codes;
            window_usage.fill(0);
        }
        let opts = RolloutOptions { quantize: step >= warmup, ..base_opts };
        store.zero_grads();
        let log_now = step % LOG_EVERY == 0 || step + 1 == cfg.stage1_steps;
        let mut ce_sum = vec![0.0f64; dist.iterations];
        let mut commit_sum = vec![0.0f64; dist.iterations];
        let mut codebook_sum = vec![0.0f64; dist.iterations];
        let mut usage = vec![0u64; dist.k_latent];
        factored_rows.clear();
        for _ in 0..cfg.batch {
            let grid = &grids[rng.below(grids.len())];
            let mut tape: Tape<f32> = Tape::new();
            let graph = rollout::rollout_on_tape(&mut tape, store, &dist, grid, &opts)?;
            // mean over iterations of (w_ce·CE + commit + w_codebook·codebook)
            let mut per_iter: Vec<TensorId> = Vec::with_capacity(dist.iterations);
            for (t, it) in graph.iters.iter().enumerate() {
                let ce = it.token_ce.expect("TokenLogits head");
                let ce_w = tape.scale(ce, cfg.w_ce as f64);
                let cb_w = tape.scale(it.codebook_loss, cfg.w_codebook as f64);
                let mut term = tape.add(ce_w, it.commit_loss)?;
                term = tape.add(term, cb_w)?;
                per_iter.push(term);
                ce_sum[t] += tape.scalar_value(ce) as f64;
                commit_sum[t] += tape.scalar_value(it.commit_loss) as f64;
                codebook_sum[t] += tape.scalar_value(it.codebook_loss) as f64;
                for &i in &it.latent_indices {
                    usage[i] += 1;
                    window_usage[i] += 1;
                }
            }
            let last = graph.iters.last().expect("iterations >= 1");
            factored_rows.extend_from_slice(tape.to_tensor(last.factored).data());
            let mut total = per_iter[0];
            for &term in &per_iter[1..] {
                total = tape.add(total, term)?;
            }
            let total = tape.scale(total, 1.0 / dist.iterations as f64);
            tape.backward(total)?;
            tape.export_grads(1.0 / cfg.batch as f32, |name, g| store.accumulate_grad(name, g));
        }
        store.adam_step(&adam);
        // revive latent codes unused over the whole window: with the
        // straight-through estimator collapsed codes get no gradient
        // and never recover on their own
        if step >= warmup && (step + 1) % revive_every == 0 && !factored_rows.is_empty() {
            let rows = factored_rows.len() / dist.d_f;
            let batch_t = Tensor::new(vec![rows, dist.d_f], factored_rows.clone())?;
            let mut cb = Codebook::new(store.get("latent_codebook.codes").clone(), true);
            cb.usage = window_usage.clone();
            quantizer::revive_dead_codes(&mut cb, &batch_t, 1, rng)?;
            *store.get_mut("latent_codebook.codes") = cb.codes;
            window_usage.fill(0);
        }
        if log_now {
            let perplexity = quantizer::perplexity(&usage);
            for t in 0..dist.iterations {
                metrics.push(MetricsRow {
                    step,
                    stage: 1,
                    iteration: t + 1,
                    token_ce: Some((ce_sum[t] / cfg.batch as f64) as f32),
                    pixel_l1: None,
                    commit: (commit_sum[t] / cfg.batch as f64) as f32,
                    codebook: (codebook_sum[t] / cfg.batch as f64) as f32,
                    perplexity,
                });
            }
        }
    }
    Ok(metrics)
}

// ── stage 2 ─────────────────────────────────────────────────────────

/// Full fine-tuning: per step sample T uniformly from 1..=iterations,
/// run the encoder recurrence T times, decode once through the pixel
/// path, and train everything (base tokenizer included) on pixel L1
/// plus the quantizer losses. Halting is off.
pub fn stage2_finetune(
    store: &mut ParamStore,
    cfg: &TrainConfig,
    scenes: &[ShapeScene],
    rng: &mut Rng,
) -> Result<Vec<MetricsRow>> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("stage 2 needs a nonempty dataset".into()));
    }
    if !base_tokenizer::is_initialized(store) || !store.contains("distill.init") {
        return Err(Error::InvalidArgument("stage 2 needs a stage-1 checkpoint".into()));
    }
    let base = cfg.base_config();
    let dist = cfg.distill_config();
    store.set_all_trainable(true);
    let adam = cfg.adam();
    let patches: Vec<Tensor> = scenes
        .iter()
        .map(|s| base_tokenizer::patchify(&s.image, base.patch))
        .collect::<Result<_>>()?;
    let mut metrics = Vec::new();
    for step in 0..cfg.stage2_steps {
        store.zero_grads();
        let t_sampled = 1 + rng.below(dist.iterations);
        let opts = RolloutOptions {
            iterations: t_sampled,
            policy: HaltingPolicy::Disabled,
            schedule: DecodeSchedule::FinalOnly,
            head: DecodeHead::PixelEmbeddings,
            beta: cfg.beta as f64,
            quantize: true,
        };
        let mut l1_sum = 0.0f64;
        let mut commit_sum = 0.0f64;
        let mut codebook_sum = 0.0f64;
        let mut usage = vec![0u64; dist.k_latent];
        for _ in 0..cfg.batch {
            let p = &patches[rng.below(patches.len())];
            let mut tape: Tape<f32> = Tape::new();
            let pid = tape.leaf(p, false);
            let enc = base_tokenizer::encode_on_tape(&mut tape, store, &base, pid, cfg.beta as f64)?;
            let graph =
                rollout::rollout_graph(&mut tape, store, &dist, enc.embeddings, &enc.indices, &opts)?;
            let last = graph.iters.last().expect("iterations >= 1");
            let emb = last.readout.expect("FinalOnly decodes the last iteration");
            let recon = base_tokenizer::decode_on_tape(&mut tape, store, &base, emb)?;
            let l1 = tape.l1_loss(recon, pid)?;
            let mut total = tape.scale(l1, cfg.w_pixel as f64);
            // quantizer losses: base encoder plus every rollout iteration
            total = tape.add(total, enc.commit_loss)?;
            let base_cb = tape.scale(enc.codebook_loss, cfg.w_codebook as f64);
            total = tape.add(total, base_cb)?;
            for it in &graph.iters {
                total = tape.add(total, it.commit_loss)?;
                let cb = tape.scale(it.codebook_loss, cfg.w_codebook as f64);
                total = tape.add(total, cb)?;
                for &i in &it.latent_indices {
                    usage[i] += 1;
                }
            }
            tape.backward(total)?;
            l1_sum += tape.scalar_value(l1) as f64;
            commit_sum += tape.scalar_value(last.commit_loss) as f64;
            codebook_sum += tape.scalar_value(last.codebook_loss) as f64;
            tape.export_grads(1.0 / cfg.batch as f32, |name, g| store.accumulate_grad(name, g));
        }
        store.adam_step(&adam);
        if step % LOG_EVERY == 0 || step + 1 == cfg.stage2_steps {
            metrics.push(MetricsRow {
                step,
                stage: 2,
                iteration: t_sampled,
                token_ce: None,
                pixel_l1: Some((l1_sum / cfg.batch as f64) as f32),
                commit: (commit_sum / cfg.batch as f64) as f32,
                codebook: (codebook_sum / cfg.batch as f64) as f32,
                perplexity: quantizer::perplexity(&usage),
            });
        }
    }
    Ok(metrics)
}

// ── evaluation helpers ──────────────────────────────────────────────

/// Mean smoothed token CE at iteration `t` over a validation set.
pub fn eval_token_ce(
    store: &ParamStore,
    cfg: &TrainConfig,
    scenes: &[ShapeScene],
    t: usize,
) -> Result<f32> {
    let base = cfg.base_config();
    let dist = cfg.distill_config();
    let mut sum = 0.0f64;
    for scene in scenes {
        let grid = base_tokenizer::encode_image(store, &base, &scene.image)?;
        let trace = rollout::run_rollout(
            store,
            &base,
            &dist,
            &grid,
            t,
            HaltingPolicy::Disabled,
            None,
        )?;
        sum += trace.iterations.last().expect("t >= 1").token_ce as f64;
    }
    Ok((sum / scenes.len() as f64) as f32)
}

/// Mean pixel L1 of the stage-2 path at iteration `t` over a set.
pub fn eval_pixel_l1(
    store: &ParamStore,
    cfg: &TrainConfig,
    scenes: &[ShapeScene],
    t: usize,
) -> Result<f32> {
    let base = cfg.base_config();
    let dist = cfg.distill_config();
    let mut sum = 0.0f64;
    for scene in scenes {
        let grid = base_tokenizer::encode_image(store, &base, &scene.image)?;
        let trace = rollout::run_rollout(
            store,
            &base,
            &dist,
            &grid,
            t,
            HaltingPolicy::Disabled,
            Some(&scene.image),
        )?;
        sum += trace.iterations.last().expect("t >= 1").pixel_l1.expect("image given") as f64;
    }
    Ok((sum / scenes.len() as f64) as f32)
}

/// Load the configured dataset: from disk when `dataset` is set,
/// otherwise generated from the seed.
pub fn load_scenes(cfg: &TrainConfig) -> Result<Vec<ShapeScene>> {
    match &cfg.dataset {
        Some(dir) => crate::data::read_dataset(dir),
        None => crate::data::gen_shapes(
            cfg.dataset_size,
            cfg.seed,
            (cfg.complexity_lo, cfg.complexity_hi),
        ),
    }
}
