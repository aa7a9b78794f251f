//! Command-line front end: thin orchestration over the library.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (message on
//! stderr), 2 on a usage error (clap's default).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analysis::{self, PoolSpec};
use crate::base_tokenizer::{self, init_base};
use crate::check;
use crate::data;
use crate::distill::init_distill;
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::rng::Rng;
use crate::rollout::{self, HaltingPolicy, RolloutTrace};
use crate::training::{self, TrainConfig, METRICS_HEADER};

#[derive(Parser)]
#[command(name = "alit", about = "Adaptive-length image tokenizer", version)]
pub struct Cli {
    /// Training/model configuration file (key = value lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override the configured RNG seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory for files this command writes.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset (PPM images, instance
    /// masks, labels.csv).
    GenData {
        /// Number of scenes; defaults to the configured dataset size.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the base 2D tokenizer (VQ autoencoder) from scratch.
    TrainBase,
    /// Stage-1 latent distillation pretraining on top of a frozen base.
    TrainAlit {
        /// Checkpoint holding the trained base tokenizer.
        #[arg(long)]
        base: PathBuf,
    },
    /// Stage-2 full finetuning with the pixel reconstruction loss.
    Finetune {
        /// Stage-1 checkpoint to start from.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Encode one image into a latent-index bitstream.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (PPM).
        #[arg(long)]
        image: PathBuf,
        /// Fixed token budget (multiple of the atomic latent count).
        #[arg(long, conflicts_with = "tsc_l1")]
        budget: Option<usize>,
        /// Adaptive budget: stop at the first iteration whose pixel
        /// reconstruction L1 falls below this threshold.
        #[arg(long)]
        tsc_l1: Option<f32>,
    },
    /// Decode a bitstream back to a PPM image.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input bitstream file.
        #[arg(long)]
        bitstream: PathBuf,
    },
    /// Per-iteration rollout trace of one image as CSV.
    RolloutTrace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Iterations to roll out.
        #[arg(long, default_value_t = 8)]
        iterations: usize,
        /// Apply the argmax-match halting policy.
        #[arg(long)]
        halting: bool,
    },
    /// Dataset token-to-image ratio curve over a threshold sweep.
    TscCurve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated L1 thresholds; default sweeps 0.02..0.20.
        #[arg(long)]
        thresholds: Option<String>,
        /// Number of validation scenes to trace.
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
    /// Decoder attention maps of one image as PGM files plus an index.
    AttnMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 8)]
        iteration: usize,
        /// Decoder layer to read attention from.
        #[arg(long, default_value_t = 1)]
        layer: usize,
    },
    /// Linear shape-classification probe on pooled encoder features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        iteration: usize,
        /// Feature pool: image-tokens, latents, or both.
        #[arg(long, default_value = "latents")]
        pool: String,
        /// Number of scenes to probe on.
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
    /// Finite-difference gradient verification of every operator and
    /// the full distillation stack.
    GradCheck {
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
}

/// Run the CLI against parsed arguments; errors map to exit code 1.
pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => training::parse_config_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(&cli.out)?;

    match &cli.command {
        Command::GenData { count } => gen_data(&cfg, &cli.out, *count),
        Command::TrainBase => train_base(&cfg, &cli.out),
        Command::TrainAlit { base } => train_alit(&cfg, &cli.out, base),
        Command::Finetune { checkpoint } => finetune(&cfg, &cli.out, checkpoint),
        Command::Encode { checkpoint, image, budget, tsc_l1 } => {
            encode(&cli.out, checkpoint, image, *budget, *tsc_l1)
        }
        Command::Decode { checkpoint, bitstream } => decode(&cli.out, checkpoint, bitstream),
        Command::RolloutTrace { checkpoint, image, iterations, halting } => {
            rollout_trace(&cli.out, checkpoint, image, *iterations, *halting)
        }
        Command::TscCurve { checkpoint, thresholds, count } => {
            tsc_curve(&cfg, &cli.out, checkpoint, thresholds.as_deref(), *count)
        }
        Command::AttnMaps { checkpoint, image, iteration, layer } => {
            attn_maps(&cli.out, checkpoint, image, *iteration, *layer)
        }
        Command::Probe { checkpoint, iteration, pool, count } => {
            probe(&cfg, checkpoint, *iteration, pool, *count)
        }
        Command::GradCheck { tol } => grad_check_cmd(*tol),
    }
}

fn load_ckpt(path: &Path) -> Result<(ParamStore, TrainConfig)> {
    training::load_checkpoint(path)
}

fn read_image(path: &Path) -> Result<crate::tensor::Tensor> {
    data::read_ppm(&std::fs::read(path)?)
}

fn write_metrics(path: &Path, rows: &[training::MetricsRow]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    Ok(std::fs::write(path, text)?)
}

fn gen_data(cfg: &TrainConfig, out: &Path, count: Option<usize>) -> Result<()> {
    let n = count.unwrap_or(cfg.dataset_size);
    let scenes = data::gen_shapes(n, cfg.seed, (cfg.complexity_lo, cfg.complexity_hi))?;
    data::write_dataset(out, &scenes)?;
    println!("wrote {n} scenes to {}", out.display());
    Ok(())
}

fn train_base(cfg: &TrainConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut store = ParamStore::new();
    init_base(&mut store, &cfg.base_config(), &mut rng);
    init_distill(&mut store, &cfg.distill_config(), &mut rng);
    let scenes = training::load_scenes(cfg)?;
    let images: Vec<_> = scenes.iter().map(|s| s.image.clone()).collect();
    let log = base_tokenizer::train_base(
        &mut store,
        &cfg.base_config(),
        &images,
        cfg.base_steps,
        cfg.batch,
        &cfg.adam(),
        &mut rng,
    )?;
    let mut saved = cfg.clone();
    saved.rng_state = rng.state();
    training::save_checkpoint(&out.join("base.ckpt"), &store, &saved)?;
    let mut csv = String::from("step,loss,perplexity\n");
    for e in &log {
        csv.push_str(&format!("{},{},{}\n", e.step, e.loss, e.perplexity));
    }
    std::fs::write(out.join("base_metrics.csv"), csv)?;
    println!(
        "base tokenizer trained for {} steps; final loss {:.4}",
        cfg.base_steps,
        log.last().map(|e| e.loss).unwrap_or(f32::NAN)
    );
    Ok(())
}

fn train_alit(cfg: &TrainConfig, out: &Path, base: &Path) -> Result<()> {
    let (mut store, _) = load_ckpt(base)?;
    let mut cfg = cfg.clone();
    cfg.validate()?;
    let scenes = training::load_scenes(&cfg)?;
    let mut rng = resume_rng(&cfg);
    let rows = training::stage1_pretrain(&mut store, &cfg, &scenes, &mut rng)?;
    cfg.rng_state = rng.state();
    training::save_checkpoint(&out.join("stage1.ckpt"), &store, &cfg)?;
    write_metrics(&out.join("stage1_metrics.csv"), &rows)?;
    println!("stage-1 pretraining done ({} steps)", cfg.stage1_steps);
    Ok(())
}

fn finetune(cfg: &TrainConfig, out: &Path, checkpoint: &Path) -> Result<()> {
    let (mut store, _) = load_ckpt(checkpoint)?;
    let mut cfg = cfg.clone();
    cfg.validate()?;
    let scenes = training::load_scenes(&cfg)?;
    let mut rng = resume_rng(&cfg);
    let rows = training::stage2_finetune(&mut store, &cfg, &scenes, &mut rng)?;
    cfg.rng_state = rng.state();
    training::save_checkpoint(&out.join("stage2.ckpt"), &store, &cfg)?;
    write_metrics(&out.join("stage2_metrics.csv"), &rows)?;
    println!("stage-2 finetuning done ({} steps)", cfg.stage2_steps);
    Ok(())
}

fn resume_rng(cfg: &TrainConfig) -> Rng {
    if cfg.rng_state != 0 {
        Rng::from_state(cfg.rng_state)
    } else {
        Rng::new(cfg.seed)
    }
}

fn encode(
    out: &Path,
    checkpoint: &Path,
    image: &Path,
    budget: Option<usize>,
    tsc_l1: Option<f32>,
) -> Result<()> {
    let (store, cfg) = load_ckpt(checkpoint)?;
    let base = cfg.base_config();
    let dist = cfg.distill_config();
    let img = read_image(image)?;
    let grid = base_tokenizer::encode_image(&store, &base, &img)?;
    let (latents, used) = match (budget, tsc_l1) {
        (Some(m), None) => {
            if m == 0 || m % dist.atomic != 0 || m > dist.max_tokens() {
                return Err(Error::InvalidArgument(format!(
                    "budget {m} must be a positive multiple of {} up to {}",
                    dist.atomic,
                    dist.max_tokens()
                )));
            }
            let t = m / dist.atomic;
            let trace =
                rollout::run_rollout(&store, &base, &dist, &grid, t, HaltingPolicy::Disabled, None)?;
            let last = trace.iterations.last().expect("t >= 1");
            (last.latents.clone(), t)
        }
        (None, Some(tau)) => {
            let (latents, t) = rollout::encode_adaptive(&store, &base, &dist, &grid, &img, tau)?;
            (latents, t)
        }
        _ => {
            return Err(Error::InvalidArgument(
                "encode needs exactly one of --budget or --tsc-l1".into(),
            ))
        }
    };
    let bytes = data::encode_bitstream(&latents.indices, dist.k_latent)?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let path = out.join(format!("{stem}.altb"));
    std::fs::write(&path, &bytes)?;
    println!(
        "{} tokens ({} iterations), {} bytes -> {}",
        latents.indices.len(),
        used,
        bytes.len(),
        path.display()
    );
    Ok(())
}

fn decode(out: &Path, checkpoint: &Path, bitstream: &Path) -> Result<()> {
    let (store, cfg) = load_ckpt(checkpoint)?;
    let (indices, k) = data::decode_bitstream(&std::fs::read(bitstream)?)?;
    let dist = cfg.distill_config();
    if k != dist.k_latent {
        return Err(Error::InvalidArgument(format!(
            "bitstream codebook size {k} does not match checkpoint ({})",
            dist.k_latent
        )));
    }
    let image = rollout::decode_latent_indices(&store, &cfg.base_config(), &dist, &indices)?;
    let stem = bitstream.file_stem().and_then(|s| s.to_str()).unwrap_or("decoded");
    let path = out.join(format!("{stem}.ppm"));
    std::fs::write(&path, data::write_ppm(&image)?)?;
    println!("decoded {} tokens -> {}", indices.len(), path.display());
    Ok(())
}

fn rollout_trace(
    out: &Path,
    checkpoint: &Path,
    image: &Path,
    iterations: usize,
    halting: bool,
) -> Result<()> {
    let (store, cfg) = load_ckpt(checkpoint)?;
    let img = read_image(image)?;
    let base = cfg.base_config();
    let grid = base_tokenizer::encode_image(&store, &base, &img)?;
    let policy = if halting {
        HaltingPolicy::ArgmaxMatch
    } else {
        HaltingPolicy::Disabled
    };
    let trace = rollout::run_rollout(
        &store,
        &base,
        &cfg.distill_config(),
        &grid,
        iterations,
        policy,
        Some(&img),
    )?;
    let mut csv = String::from(RolloutTrace::CSV_HEADER);
    csv.push('\n');
    csv.push_str(&trace.to_csv(0));
    let path = out.join("trace.csv");
    std::fs::write(&path, csv)?;
    println!("wrote {} iterations to {}", trace.iterations.len(), path.display());
    Ok(())
}

fn tsc_curve(
    cfg: &TrainConfig,
    out: &Path,
    checkpoint: &Path,
    thresholds: Option<&str>,
    count: usize,
) -> Result<()> {
    let (store, ckpt_cfg) = load_ckpt(checkpoint)?;
    let taus: Vec<f32> = match thresholds {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f32>()
                    .map_err(|_| Error::InvalidArgument(format!("bad threshold `{s}`")))
            })
            .collect::<Result<_>>()?,
        None => (1..=10).map(|i| i as f32 * 0.02).collect(),
    };
    let scenes = data::gen_shapes(count, cfg.seed + 1, (cfg.complexity_lo, cfg.complexity_hi))?;
    let points = analysis::dataset_representation_curve(
        &store,
        &ckpt_cfg.base_config(),
        &ckpt_cfg.distill_config(),
        &scenes,
        &taus,
    )?;
    let path = out.join("tsc_curve.csv");
    std::fs::write(&path, analysis::curve_to_csv(&points))?;
    println!("wrote {} curve points to {}", points.len(), path.display());
    Ok(())
}

fn attn_maps(
    out: &Path,
    checkpoint: &Path,
    image: &Path,
    iteration: usize,
    layer: usize,
) -> Result<()> {
    let (store, cfg) = load_ckpt(checkpoint)?;
    let img = read_image(image)?;
    let base = cfg.base_config();
    let grid = base_tokenizer::encode_image(&store, &base, &img)?;
    let map = analysis::attention_maps(&store, &cfg.distill_config(), &grid, iteration, layer)?;
    let g = map.grid;
    let mut index = String::from("token,file,peak\n");
    for j in 0..map.maps.rows() {
        let row = map.maps.row(j);
        let peak = row.iter().cloned().fold(0.0f32, f32::max).max(1e-12);
        let pixels: Vec<u8> = row
            .iter()
            .map(|&v| ((v / peak) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let file = format!("attn_{j:02}.pgm");
        std::fs::write(out.join(&file), data::write_pgm(&pixels, g, g)?)?;
        index.push_str(&format!("{j},{file},{peak}\n"));
    }
    std::fs::write(out.join("attn_index.csv"), index)?;
    println!("wrote {} maps (layer {layer}, iteration {iteration}) to {}", map.maps.rows(), out.display());
    Ok(())
}

fn probe(
    cfg: &TrainConfig,
    checkpoint: &Path,
    iteration: usize,
    pool: &str,
    count: usize,
) -> Result<()> {
    let (store, ckpt_cfg) = load_ckpt(checkpoint)?;
    let pool = match pool {
        "image-tokens" => PoolSpec::ImageTokens,
        "latents" => PoolSpec::Latents { first_k: None },
        "both" => PoolSpec::Both { first_k: None },
        other => {
            return Err(Error::InvalidArgument(format!("unknown pool `{other}`")))
        }
    };
    let scenes = data::gen_shapes(count, cfg.seed + 2, (cfg.complexity_lo, cfg.complexity_hi))?;
    let base = ckpt_cfg.base_config();
    let dist = ckpt_cfg.distill_config();
    let mut features = Vec::with_capacity(scenes.len());
    let mut labels = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        features.push(analysis::extract_features(
            &store,
            &base,
            &dist,
            &scene.image,
            iteration,
            pool,
        )?);
        labels.push(scene.label);
    }
    let acc =
        analysis::linear_probe(&features, &labels, data::SHAPE_CLASSES, 0.75, 400, cfg.seed)?;
    println!("probe accuracy: {:.1}% over {} held-out scenes", acc * 100.0, count / 4);
    Ok(())
}

fn grad_check_cmd(tol: f64) -> Result<()> {
    let results = check::grad_check_suite(tol)?;
    let mut failures = 0usize;
    for (name, report) in &results {
        println!("{name}: {report}");
        if !report.pass {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::InvalidArgument(format!(
            "{failures} of {} gradient checks failed",
            results.len()
        )));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}
