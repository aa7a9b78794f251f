// Temporary experiment runner (not part of the deliverable): stage-1
// with quantization warmup, sweeping lr / warmup / total steps.
use alit::quantizer;
use alit::rng::Rng;
use alit::training::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f32 = args[1].parse().unwrap();
    let warmup: usize = args[2].parse().unwrap();
    let steps: usize = args[3].parse().unwrap();
    let (mut store, mut cfg) =
        load_checkpoint(std::path::Path::new("target/pretrain/base.ckpt")).unwrap();
    cfg.lr = lr;
    cfg.quant_warmup = warmup;
    cfg.stage1_steps = steps;
    if std::env::var("NOHALT").is_ok() {
        cfg.halting = false;
    }
    let scenes = load_scenes(&cfg).unwrap();
    let val = alit::data::gen_shapes(64, 999, (1, 6)).unwrap();
    let mut rng = Rng::new(cfg.seed);
    let t0 = std::time::Instant::now();
    let metrics = stage1_pretrain(&mut store, &cfg, &scenes, &mut rng).unwrap();
    let secs = t0.elapsed().as_secs();
    for m in metrics.iter().filter(|m| m.iteration == cfg.iterations) {
        if m.step % 200 == 0 || m.step + 1 == steps {
            println!(
                "step {} CE(T=8 train) {:.3} commit {:.4} perp {:.1}",
                m.step,
                m.token_ce.unwrap(),
                m.commit,
                m.perplexity
            );
        }
    }
    let ce1 = eval_token_ce(&store, &cfg, &val, 1).unwrap();
    let ce8 = eval_token_ce(&store, &cfg, &val, 8).unwrap();
    let base = cfg.base_config();
    let dist = cfg.distill_config();
    let mut vu = vec![0u64; dist.k_latent];
    for s in &val {
        let grid = alit::base_tokenizer::encode_image(&store, &base, &s.image).unwrap();
        let tr = alit::rollout::run_rollout(
            &store,
            &base,
            &dist,
            &grid,
            8,
            alit::rollout::HaltingPolicy::Disabled,
            None,
        )
        .unwrap();
        for &i in &tr.iterations.last().unwrap().latents.indices {
            vu[i] += 1;
        }
    }
    println!(
        "lr {lr} warmup {warmup} steps {steps}: val CE(T=1) {ce1:.4} CE(T=8) {ce8:.4} val-perp {:.1} [{secs}s]",
        quantizer::perplexity(&vu)
    );
}
