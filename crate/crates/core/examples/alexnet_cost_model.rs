//! Calibrate the cost model on the shipped single-node timings and print the
//! fitted parameters, the per-row fit and the derived speedups.
//!
//! Run with `cargo run --release --example alexnet_cost_model`.

use parconv::costmodel::{CalibrationSetup, CommModel, calibrate, load_observations};
use parconv::netdef::parse_network_file;

const ASSETS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/assets");
/// conv2 and conv3 of the AlexNet-scale network.
const CROSS_LAYERS: [usize; 2] = [3, 6];

fn main() -> parconv::Result<()> {
    let net = parse_network_file(format!("{ASSETS}/alexnet.net"))?;
    let observations = load_observations(format!("{ASSETS}/table1.csv"), &CROSS_LAYERS)?;
    for model in [CommModel::PerWorker, CommModel::Aggregate] {
        let setup = CalibrationSetup {
            comm_model: model,
            ..CalibrationSetup::default()
        };
        let cal = calibrate(&observations, &net, &setup)?;
        println!("== {model:?} communication model");
        print!("{}", cal.params.to_text());
        println!("{cal}");
        let days = |d: usize, m: usize| {
            cal.fit
                .iter()
                .find(|(o, _)| o.plan.data_shards == d && o.plan.model_columns == m)
                .map(|(_, p)| *p)
                .expect("row present")
        };
        let single = days(1, 1);
        println!(
            "speedups: 2-data {:.3}, 2-model {:.3}, 4-hybrid {:.3}, 4-data {:.3}\n",
            single / days(2, 1),
            single / days(1, 2),
            single / days(2, 2),
            single / days(4, 1)
        );
    }
    Ok(())
}
