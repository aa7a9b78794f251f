//! Linear probe: classify the dominant shape of each scene from
//! mean-pooled encoder features, comparing the available pools.
//!
//! ```sh
//! cargo run --release --example linear_probe_classification
//! ```

#[path = "support/mod.rs"]
mod support;

use alit::analysis::{self, PoolSpec};
use alit::data;

fn main() {
    let (store, cfg) = support::demo_checkpoint();
    let base = cfg.base_config();
    let dist = cfg.distill_config();

    let scenes = data::gen_shapes(200, 31, (1, 6)).expect("scenes");
    let labels: Vec<usize> = scenes.iter().map(|s| s.label).collect();

    for (name, pool) in [
        ("image tokens", PoolSpec::ImageTokens),
        ("latents", PoolSpec::Latents { first_k: None }),
        ("both", PoolSpec::Both { first_k: None }),
    ] {
        let features: Vec<Vec<f32>> = scenes
            .iter()
            .map(|s| {
                analysis::extract_features(&store, &base, &dist, &s.image, dist.iterations, pool)
                    .expect("features")
            })
            .collect();
        let acc = analysis::linear_probe(&features, &labels, data::SHAPE_CLASSES, 0.75, 400, 0)
            .expect("probe");
        println!("{name:<13} pool: held-out accuracy {:.1}% (chance 25%)", acc * 100.0);
    }
}
