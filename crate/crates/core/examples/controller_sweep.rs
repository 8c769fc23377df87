//! Sweeps controllers and budgets over a base config and prints the
//! comparison table that `fedbatch sweep` writes.
//!
//! ```bash
//! cargo run --release --example controller_sweep
//! ```

use std::path::Path;

use fedbatch::cli::{cmd_sweep, comparison_csv, parse_axis};

fn main() -> fedbatch::Result<()> {
    let base = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/static_blobs.toml");
    let axes = vec![
        parse_axis("controller=dynamite,fedavg,dynamic_tau,no_straggler,uniform_static")?,
        parse_axis("budget=80,150")?,
    ];
    let out = std::env::temp_dir().join("fedbatch-controller-sweep");
    let rows = cmd_sweep(&base, &axes, &[1, 2], &out)?;
    print!("{}", comparison_csv(&axes, &rows));
    println!("run directories in {}", out.display());
    Ok(())
}
