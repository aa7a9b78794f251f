//! Decoder attention as emergent segmentation: dump per-latent
//! attention maps over the token grid as PGM images and score them
//! against ground-truth instance masks with mIoU.
//!
//! ```sh
//! cargo run --release --example attention_object_binding -- [out_dir]
//! ```

#[path = "support/mod.rs"]
mod support;

use alit::analysis;
use alit::base_tokenizer;
use alit::data;

fn main() {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "target/example-attn".into());
    let dir = std::path::Path::new(&out);
    std::fs::create_dir_all(dir).expect("out dir");

    let (store, cfg) = support::demo_checkpoint();
    let base = cfg.base_config();
    let dist = cfg.distill_config();
    let layer = dist.dec_depth - 1;

    // per-latent maps for one scene, rendered as PGM
    let scene = &data::gen_shapes(1, 77, (3, 3)).expect("scene")[0];
    let grid = base_tokenizer::encode_image(&store, &base, &scene.image).expect("encode");
    let map = analysis::attention_maps(&store, &dist, &grid, dist.iterations, layer)
        .expect("attention");
    for j in 0..map.maps.rows() {
        let row = map.maps.row(j);
        let peak = row.iter().cloned().fold(0.0f32, f32::max).max(1e-12);
        let px: Vec<u8> = row.iter().map(|&v| (v / peak * 255.0).round() as u8).collect();
        let bytes = data::write_pgm(&px, map.grid, map.grid).expect("pgm");
        std::fs::write(dir.join(format!("latent_{j:02}.pgm")), bytes).expect("write");
    }
    println!("wrote {} per-latent maps to {}", map.maps.rows(), dir.display());

    // recurrence sharpens the maps: mIoU should not degrade with depth
    let scenes = data::gen_shapes(64, 5, (1, 6)).expect("scenes");
    for t in [1, dist.iterations] {
        let miou = analysis::attention_miou(&store, &base, &dist, &scenes, t, layer, 40.0)
            .expect("miou");
        println!("iteration {t}: attention-mask mIoU {miou:.3} (mass threshold 40%)");
    }
}
