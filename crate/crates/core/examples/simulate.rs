//! Runs one experiment from a config file and prints the round trace.
//!
//! ```bash
//! cargo run --release --example simulate -- crates/core/examples/configs/static_blobs.toml
//! ```

use std::path::PathBuf;

use fedbatch::config::parse_config;
use fedbatch::sim::Simulation;

fn main() -> fedbatch::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            PathBuf::from(concat!(
                env!("CARGO_MANIFEST_DIR"),
                "/examples/configs/static_blobs.toml"
            ))
        });
    let cfg = parse_config(&path)?;
    let mut sim = Simulation::new(cfg)?;
    println!("round  tau  batches               cost     time    accuracy");
    while let Some(o) = sim.step()? {
        println!(
            "{:5}  {:3}  {:<20}  {:7.3}  {:7.2}  {:.4}",
            o.round,
            o.plan.tau,
            format!("{:?}", o.plan.batch),
            sim.tracker().spent_cost,
            sim.tracker().spent_time,
            o.test_accuracy
        );
    }
    println!(
        "remaining cost {:.3}, remaining time {:.2}",
        sim.tracker().remaining_cost(),
        sim.tracker().remaining_time()
    );
    Ok(())
}
