//! Shared helper for the runnable examples: a reduced-scale config and
//! a cached trained checkpoint so each example starts from the same
//! model without retraining.

use std::path::PathBuf;

use alit::base_tokenizer::{self, init_base};
use alit::distill::init_distill;
use alit::optim::ParamStore;
use alit::rng::Rng;
use alit::training::{self, TrainConfig};

/// Desk config shrunk further so the demo trains in a few minutes.
pub fn demo_config() -> TrainConfig {
    TrainConfig {
        d_2d: 32,
        base_steps: 400,
        stage1_steps: 800,
        stage2_steps: 500,
        dataset_size: 200,
        ..TrainConfig::default()
    }
}

/// Train (or load from `target/example-ckpt/`) the shared demo model:
/// base tokenizer, then stage-1 distillation, then stage-2 finetuning.
pub fn demo_checkpoint() -> (ParamStore, TrainConfig) {
    let cfg = demo_config();
    let path = PathBuf::from("target/example-ckpt/demo.ckpt");
    if let Ok((store, saved)) = training::load_checkpoint(&path) {
        // same config modulo the RNG position the run ended on
        let mut expect = cfg.clone();
        expect.rng_state = saved.rng_state;
        if saved.to_text() == expect.to_text() {
            eprintln!("loaded cached demo checkpoint from {}", path.display());
            return (store, saved);
        }
    }
    eprintln!("training demo checkpoint (a few minutes, cached afterwards)...");
    let mut rng = Rng::new(cfg.seed);
    let mut store = ParamStore::new();
    init_base(&mut store, &cfg.base_config(), &mut rng);
    init_distill(&mut store, &cfg.distill_config(), &mut rng);
    let scenes = training::load_scenes(&cfg).expect("dataset");
    let images: Vec<_> = scenes.iter().map(|s| s.image.clone()).collect();
    let t0 = std::time::Instant::now();
    base_tokenizer::train_base(
        &mut store,
        &cfg.base_config(),
        &images,
        cfg.base_steps,
        cfg.batch,
        &cfg.adam(),
        &mut rng,
    )
    .expect("base training");
    eprintln!("  base tokenizer done ({:.0?})", t0.elapsed());
    let t0 = std::time::Instant::now();
    training::stage1_pretrain(&mut store, &cfg, &scenes, &mut rng).expect("stage 1");
    eprintln!("  stage-1 distillation done ({:.0?})", t0.elapsed());
    let t0 = std::time::Instant::now();
    training::stage2_finetune(&mut store, &cfg, &scenes, &mut rng).expect("stage 2");
    eprintln!("  stage-2 finetuning done ({:.0?})", t0.elapsed());
    let mut saved = cfg;
    saved.rng_state = rng.state();
    std::fs::create_dir_all(path.parent().unwrap()).expect("cache dir");
    training::save_checkpoint(&path, &store, &saved).expect("save checkpoint");
    eprintln!("cached demo checkpoint at {}", path.display());
    (store, saved)
}
