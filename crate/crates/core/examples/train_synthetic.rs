//! Train the two-class network under several plans and overlay the curves
//! against weight updates and against simulated time.
//!
//! Run with `cargo run --release --example train_synthetic [out_dir]`.

use std::path::PathBuf;

use parconv::costmodel::CostParams;
use parconv::netdef::NetworkSpec;
use parconv::schemes::ParallelPlan;
use parconv::trainer::{Series, TrainConfig, XAxis, YAxis, emit_csv, emit_svg, gen_synthetic, train};

const ASSETS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets");

fn main() -> parconv::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "train_synthetic_out".into()));
    std::fs::create_dir_all(&out)?;
    let net = NetworkSpec::tinynet().with_classes(2)?;
    let (train_set, test_set) = gen_synthetic(2, 500, net.input(), 1)?;
    let cost = CostParams::load(format!("{ASSETS}/alexnet_calibrated.cost"))?;
    let plans = [(1, 1), (2, 1), (1, 2), (2, 2)];
    let mut runs = Vec::new();
    for (d, m) in plans {
        let cross = if m > 1 { vec![NetworkSpec::TINYNET_CROSS_LAYER] } else { vec![] };
        let mut cfg = TrainConfig::new(net.clone(), ParallelPlan::new(d, m, cross)?);
        cfg.epochs = 5;
        cfg.batch = 16;
        cfg.seed = 1;
        cfg.sgd.learning_rate = 0.1;
        cfg.cost = cost;
        let run = train(&cfg, &train_set, &test_set)?;
        let errors: Vec<String> = run.records.iter().filter_map(|r| r.test_error).map(|e| format!("{e:.3}")).collect();
        println!("plan {}: test error per epoch {}", cfg.plan, errors.join(" "));
        emit_csv(&run.records, out.join(format!("metrics_d{d}_m{m}.csv")))?;
        runs.push((cfg.plan.to_string(), run.records));
    }
    let series: Vec<Series> = runs.iter().map(|(label, records)| Series { label, records }).collect();
    for x in [XAxis::Updates, XAxis::SimTime] {
        for y in [YAxis::TrainLoss, YAxis::TestError] {
            emit_svg(&series, x, y, out.join(format!("{}_vs_{}.svg", y.slug(), x.slug())))?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
