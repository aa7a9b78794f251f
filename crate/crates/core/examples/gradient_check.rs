//! Verify every differentiable operator and the full Enc-Dec stack
//! against a 64-bit central finite-difference oracle.
//!
//! ```sh
//! cargo run --release --example gradient_check
//! ```

fn main() {
    let t0 = std::time::Instant::now();
    let results = alit::check::grad_check_suite(1e-3).expect("suite");
    let mut failures = 0usize;
    for (name, report) in &results {
        println!("{name:<28} {report}");
        if !report.pass {
            failures += 1;
        }
    }
    println!(
        "{} checks, {} failures, {:.0?}",
        results.len(),
        failures,
        t0.elapsed()
    );
    assert_eq!(failures, 0);
}
