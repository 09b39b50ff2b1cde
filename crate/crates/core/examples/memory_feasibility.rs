//! Per-device memory footprints of each plan, and which plans fit a device
//! too small for the whole model.
//!
//! Run with `cargo run --example memory_feasibility`.

use parconv::costmodel::StepLoad;
use parconv::netdef::{NetworkSpec, column_footprint_bytes, columnize, network_footprint_bytes};
use parconv::schemes::ParallelPlan;

fn main() -> parconv::Result<()> {
    let net = NetworkSpec::tinynet();
    let batch = 16;
    let cross = [NetworkSpec::TINYNET_CROSS_LAYER];
    let full = network_footprint_bytes(&net, batch, true);
    let capacity = column_footprint_bytes(&columnize(&net, 2, &cross)?, batch, true);
    println!("batch {batch}: whole model needs {full} B per device; capacity set to {capacity} B");
    println!("{:<6} {:>14} {:>10}", "plan", "largest_bytes", "fits");
    for (d, m) in [(1, 1), (2, 1), (4, 1), (1, 2), (2, 2), (1, 4)] {
        let plan = ParallelPlan::new(d, m, if m > 1 { cross.to_vec() } else { vec![] })?;
        let load = StepLoad::new(&plan, &net, batch)?;
        let largest = load.worker_footprints.iter().copied().max().unwrap_or(0);
        let verdict = match load.check_memory(capacity) {
            Ok(()) => "yes".to_owned(),
            Err(e) => format!("no ({e})"),
        };
        println!("{:<6} {:>14} {:>10}", plan.to_string(), largest, verdict);
    }
    Ok(())
}
