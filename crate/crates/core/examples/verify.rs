//! Runs every self-check suite: gradient checks, spline exactness,
//! augmentation landmark mapping and oracle equivalence.
//!
//! ```text
//! cargo run --release --example verify -- [trials]
//! ```

use ostnet::verify::{run_all, VerifyOptions};

fn main() {
    let trials = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    let report = run_all(&VerifyOptions {
        trials,
        seed: 0,
        augment_trials: 100,
    });
    print!("{}", report.render());
    if !report.passed() {
        std::process::exit(1);
    }
}
