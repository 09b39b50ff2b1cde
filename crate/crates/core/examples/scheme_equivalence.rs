//! Train the same initial network under data, model and hybrid parallel
//! plans and compare each with single-device SGD update by update.
//!
//! Run with `cargo run --example scheme_equivalence [steps]`.

use parconv::fabric::Scheduling;
use parconv::model::{Batch, Params};
use parconv::netdef::NetworkSpec;
use parconv::schemes::{ParallelPlan, comm_volume, equivalence_divergence};
use parconv::sgd::SgdConfig;
use parconv::trainer::gen_synthetic;

fn main() -> parconv::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let batch = 16;
    let net = NetworkSpec::tinynet();
    let (data, _) = gen_synthetic(net.classes(), (steps * batch).div_ceil(net.classes()), net.input(), 3)?;
    let batches = (0..steps)
        .map(|s| {
            let rows: Vec<usize> = (s * batch..(s + 1) * batch).collect();
            Batch::new(data.images().select_rows(&rows)?, rows.iter().map(|&r| data.labels()[r]).collect())
        })
        .collect::<parconv::Result<Vec<_>>>()?;
    let params = Params::init(&net, 3);
    println!("{steps} updates at batch {batch}, compared with single-device SGD");
    println!("{:<6} {:>12} {:>12} {:>14}", "plan", "loss_gap", "param_gap", "bytes/step");
    for (d, m) in [(1, 1), (2, 1), (4, 1), (1, 2), (1, 4), (2, 2)] {
        let cross = if m > 1 { vec![NetworkSpec::TINYNET_CROSS_LAYER] } else { vec![] };
        let plan = ParallelPlan::new(d, m, cross)?;
        let div = equivalence_divergence(&net, &plan, &params, SgdConfig::default(), &batches, Scheduling::Cooperative)?;
        let bytes = comm_volume(&plan, &net, batch)?.total_bytes();
        println!("{:<6} {:>12.3e} {:>12.3e} {:>14}", plan.to_string(), div.loss, div.params, bytes);
    }
    Ok(())
}
