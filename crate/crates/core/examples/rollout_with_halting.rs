//! Recurrent rollout with dynamic halting: per-iteration trace of
//! token counts, reconstruction CE, pixel L1 and how many image tokens
//! have been halted (and thus removed from the encoder input).
//!
//! ```sh
//! cargo run --release --example rollout_with_halting
//! ```

#[path = "support/mod.rs"]
mod support;

use alit::base_tokenizer;
use alit::data;
use alit::rollout::{self, HaltingPolicy, RolloutTrace};

fn main() {
    let (store, cfg) = support::demo_checkpoint();
    let base = cfg.base_config();
    let dist = cfg.distill_config();

    let scenes = data::gen_shapes(3, 11, (1, 6)).expect("scenes");
    println!("{}", RolloutTrace::CSV_HEADER);
    for (id, scene) in scenes.iter().enumerate() {
        let grid = base_tokenizer::encode_image(&store, &base, &scene.image).expect("encode");
        let trace = rollout::run_rollout(
            &store,
            &base,
            &dist,
            &grid,
            dist.iterations,
            HaltingPolicy::ArgmaxMatch,
            Some(&scene.image),
        )
        .expect("rollout");
        print!("{}", trace.to_csv(id));
        let halted: Vec<usize> = trace.iterations.iter().map(|i| i.halted_count).collect();
        eprintln!(
            "# scene {id}: {} shapes, halted per iteration {halted:?}",
            scene.complexity
        );
    }
}
