//! Finite-difference check of every backward kernel on random small shapes.
//!
//! Run with `cargo run --example gradient_check [seed] [trials]`.

use parconv::gradcheck::{FD_STEP, FD_TOLERANCE, check_all};

fn main() -> parconv::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let trials = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);
    println!("central differences, step {FD_STEP:e}, tolerance {FD_TOLERANCE:e}");
    println!("{:<14} {:>7} {:>14} {:>6}", "kernel", "trials", "worst_rel_err", "ok");
    for c in check_all(seed, trials)? {
        println!("{:<14} {:>7} {:>14.3e} {:>6}", c.kernel, c.trials, c.worst, if c.passed() { "yes" } else { "no" });
    }
    Ok(())
}
