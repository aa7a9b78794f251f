//! Token-to-image-ratio curve: sweep the reconstruction threshold and
//! report what fraction of the maximum token budget the dataset needs,
//! plus the resulting "tokens of interest" reconstruction quality.
//!
//! ```sh
//! cargo run --release --example token_to_image_curve
//! ```

#[path = "support/mod.rs"]
mod support;

use alit::analysis;
use alit::data;

fn main() {
    let (store, cfg) = support::demo_checkpoint();
    let scenes = data::gen_shapes(48, 23, (1, 6)).expect("scenes");
    let thresholds: Vec<f32> = (1..=10).map(|i| i as f32 * 0.02).collect();
    let points = analysis::dataset_representation_curve(
        &store,
        &cfg.base_config(),
        &cfg.distill_config(),
        &scenes,
        &thresholds,
    )
    .expect("curve");
    println!("{}", analysis::CURVE_CSV_HEADER);
    print!("{}", analysis::curve_to_csv(&points));
    eprintln!("# tighter thresholds demand more tokens: fraction_tokens is non-increasing in tsc");
}
