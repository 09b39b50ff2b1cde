//! Partition the desk-scale network into model-parallel columns and show
//! each column layer, its parameters and the cross-connection traffic.
//!
//! Run with `cargo run --example columnize_tinynet [columns]`.

use parconv::netdef::{NetworkSpec, columnize, cross_connection_bytes, shape_report};

fn main() -> parconv::Result<()> {
    let columns = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let net = NetworkSpec::tinynet();
    let cs = columnize(&net, columns, &[NetworkSpec::TINYNET_CROSS_LAYER])?;
    let report = cs.column_report(1);
    println!("tinynet in {columns} columns, cross layer {}", NetworkSpec::TINYNET_CROSS_LAYER);
    println!("{:>3} {:<8} {:<11} {:<9} {:>9} {:>9} {:>8}", "#", "layer", "placement", "input", "consumes", "produces", "params");
    for (i, (l, r)) in cs.layers().iter().zip(&report.layers).enumerate() {
        println!(
            "{i:>3} {:<8} {:<11} {:<9} {:>9} {:>9} {:>8}",
            l.spec.keyword(),
            format!("{:?}", l.placement),
            format!("{:?}", l.input),
            l.in_shape.to_string(),
            l.out_shape.to_string(),
            r.params
        );
    }
    println!(
        "parameters: {} per column, {} over all columns, {} unsplit",
        cs.column_params(),
        cs.total_column_params(),
        shape_report(&net, 1).total_params()
    );
    println!("gather points: {:?}", cs.gather_points());
    let batch = 16;
    let traffic = cross_connection_bytes(&cs, batch, 4);
    println!("cross-connection traffic per step at batch {batch}:");
    for t in &traffic.layers {
        println!(
            "  layer {}: slice {} elements, forward {} B, backward {} B",
            t.layer, t.slice_elements, t.forward_bytes, t.backward_bytes
        );
    }
    println!("  total {} bytes", traffic.total_bytes());
    Ok(())
}
