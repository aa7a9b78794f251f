//! Variable-length tokenization of one image: fixed budgets, the
//! adaptive token-to-image criterion, and the index bitstream.
//!
//! For each budget the image is rolled out to the matching iteration,
//! the latent indices are packed into a bitstream, and the bitstream is
//! decoded back to pixels to report the reconstruction error.
//!
//! ```sh
//! cargo run --release --example adaptive_tokenization
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

    let scene = &data::gen_shapes(1, 42, (3, 3)).expect("scene")[0];
    let grid = base_tokenizer::encode_image(&store, &base, &scene.image).expect("encode");

    println!("budget  tokens  bytes  pixel L1");
    for t in 1..=dist.iterations {
        let trace = rollout::run_rollout(
            &store,
            &base,
            &dist,
            &grid,
            t,
            HaltingPolicy::Disabled,
            Some(&scene.image),
        )
        .expect("rollout");
        let it = trace.iterations.last().expect("t >= 1");
        let bytes = data::encode_bitstream(&it.latents.indices, dist.k_latent).expect("pack");
        // decode purely from the bitstream: indices are all the decoder needs
        let (indices, _) = data::decode_bitstream(&bytes).expect("unpack");
        let recon = rollout::decode_latent_indices(&store, &base, &dist, &indices).expect("decode");
        let l1 = base_tokenizer::pixel_l1(&recon, &scene.image);
        println!(
            "  T={t}   {:>4}   {:>4}   {:.4}",
            it.latents.indices.len(),
            bytes.len(),
            l1
        );
    }

    // adaptive: stop at the first iteration under the L1 threshold
    for tau in [0.12f32, 0.08, 0.0] {
        let (latents, used) =
            rollout::encode_adaptive(&store, &base, &dist, &grid, &scene.image, tau)
                .expect("adaptive encode");
        println!(
            "tsc-l1 {tau:<5} -> {} tokens ({used} iterations)",
            latents.indices.len()
        );
    }
}
