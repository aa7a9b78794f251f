//! Complexity-compressibility: at a fixed one-iteration budget, scenes
//! with more shapes reconstruct worse — more complex images need more
//! computational tokens.
//!
//! ```sh
//! cargo run --release --example complexity_vs_budget
//! ```

#[path = "support/mod.rs"]
mod support;

use alit::base_tokenizer;
use alit::data;
use alit::rollout::{self, HaltingPolicy};

fn main() {
    let (store, cfg) = support::demo_checkpoint();
    let base = cfg.base_config();
    let dist = cfg.distill_config();

    println!("shapes  mean pixel L1 at T=1  mean tokens for L1<0.10");
    for shapes in [1usize, 3, 6] {
        let scenes = data::gen_shapes(32, 900 + shapes as u64, (shapes, shapes)).expect("scenes");
        let mut l1_sum = 0.0f64;
        let mut tok_sum = 0usize;
        for scene in &scenes {
            let grid = base_tokenizer::encode_image(&store, &base, &scene.image).expect("encode");
            let trace = rollout::run_rollout(
                &store,
                &base,
                &dist,
                &grid,
                1,
                HaltingPolicy::Disabled,
                Some(&scene.image),
            )
            .expect("rollout");
            l1_sum += trace.iterations[0].pixel_l1.expect("image given") as f64;
            let (latents, _) =
                rollout::encode_adaptive(&store, &base, &dist, &grid, &scene.image, 0.10)
                    .expect("adaptive");
            tok_sum += latents.indices.len();
        }
        println!(
            "  {shapes}        {:.4}              {:.1}",
            l1_sum / scenes.len() as f64,
            tok_sum as f64 / scenes.len() as f64
        );
    }
}
