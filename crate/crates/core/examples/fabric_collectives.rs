//! Four simulated devices run reduce/broadcast, all-gather and
//! reduce-scatter; the per-link ledger records every byte.
//!
//! Run with `cargo run --example fabric_collectives`.

use parconv::Tensor;
use parconv::fabric::{DeviceSpec, Fabric, Scheduling, WorkerId};

const WORKERS: usize = 4;
const ELEMENTS: usize = 1000;

fn main() -> parconv::Result<()> {
    let group: Vec<WorkerId> = (0..WORKERS).map(WorkerId).collect();
    let mut fabric = Fabric::spawn(WORKERS, DeviceSpec::default(), Scheduling::Threaded, |_| ())?;

    let sums = fabric.run_fn(|ep| {
        let group = group.clone();
        async move {
            let mine = Tensor::full(&[ELEMENTS], ep.id().0 as f64 + 1.0);
            let total = ep.reduce_to_root(&group, WorkerId(0), mine, "reduce").await?;
            ep.broadcast_from_root(&group, WorkerId(0), total, "broadcast").await
        }
    })?;
    println!("reduce + broadcast: every worker holds {}", sums[WORKERS - 1].data()[0]);
    let round_trip = fabric.ledger();
    println!(
        "  {} bytes in {} messages (2 x (k-1) x P x 4 = {})",
        round_trip.total_bytes(),
        round_trip.total_messages(),
        2 * (WORKERS - 1) * ELEMENTS * 4
    );

    let gathered = fabric.run_fn(|ep| {
        let group = group.clone();
        async move { ep.all_gather(&group, Tensor::full(&[ELEMENTS / WORKERS], ep.id().0 as f64), "gather").await }
    })?;
    let firsts: Vec<f64> = gathered[0].iter().map(|t| t.data()[0]).collect();
    println!("all-gather: worker 0 sees slices from workers {firsts:?}");

    let scattered = fabric.run_fn(|ep| {
        let group = group.clone();
        async move {
            let parts = (0..WORKERS).map(|_| Tensor::full(&[ELEMENTS / WORKERS], 1.0)).collect();
            ep.reduce_scatter(&group, parts, "scatter").await
        }
    })?;
    println!("reduce-scatter: worker 2 holds the sum {}", scattered[2].data()[0]);

    let ledger = fabric.ledger();
    println!("\nper-link ledger after all three programs:");
    println!("{:>4} {:>4} {:>10} {:>9}", "src", "dst", "bytes", "messages");
    for (src, dst, s) in ledger.links() {
        if s.messages > 0 {
            println!("{src:>4} {dst:>4} {:>10} {:>9}", s.bytes, s.messages);
        }
    }
    println!("total {} bytes", ledger.total_bytes());
    Ok(())
}
