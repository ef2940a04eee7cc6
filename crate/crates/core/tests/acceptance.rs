//! Runs every acceptance criterion at full size and prints one line per
//! criterion. Exits nonzero if any criterion fails.
//!
//! `IRG_ACCEPTANCE_SEED` overrides the base seed.

use irg_core::acceptance::{run_criterion, Profile, CRITERIA, DEFAULT_SEED};

fn main() {
    let seed = std::env::var("IRG_ACCEPTANCE_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_SEED);
    println!("acceptance suite, seed {seed}");
    let mut failed = 0;
    for id in 1..=CRITERIA {
        let result = run_criterion(id, Profile::Strict, seed);
        println!("{result}");
        if !result.passed {
            failed += 1;
        }
    }
    println!("{} passed, {failed} failed", CRITERIA - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
