//! Compares the uniform closed form, CoOptFL and exhaustive search on one
//! offline instance, then shows how the optimal tau moves with K.
//!
//! ```bash
//! cargo run --example allocation_solvers
//! ```

use fedbatch::bounds::{AssumptionParams, DataStats};
use fedbatch::optimizer::{
    brute_force_opt, coopt_fl_counted, uniform_closed_form, OfflineObjective,
};
use fedbatch::system::{Budget, ClientProfile};

fn main() -> fedbatch::Result<()> {
    let params = AssumptionParams::new(1.0, 1.0, 0.5, 0.2, 0.01);
    let profiles = vec![
        ClientProfile::new(10.0, 1.0, 40, 1.0),
        ClientProfile::new(40.0, 1.0, 60, 2.0),
        ClientProfile::new(20.0, 2.0, 30, 0.5),
    ];
    let rounds = 20;
    let budget = Budget::new(20.0, 300.0, 0.01, 0.5);
    let objective = OfflineObjective {
        rounds,
        params,
        stats: DataStats::from_profiles(&profiles),
        initial_gap: 2.0,
    };

    let uniform = uniform_closed_form(rounds, &budget, &profiles, &params, 2.0, 6)?;
    let (coopt, ops) = coopt_fl_counted(&objective, &profiles, &budget, rounds, 6)?;
    let exact = brute_force_opt(&objective, &profiles, &budget, rounds, 6, 60)?;
    for (name, r) in [
        ("uniform", &uniform),
        ("coopt-fl", &coopt),
        ("exhaustive", &exact),
    ] {
        println!(
            "{name:<10} tau {} batch {:?} objective {:.9} binding {:?}",
            r.tau, r.batch, r.objective, r.binding
        );
    }
    println!("coopt-fl work: {ops:?}");

    println!("\nper-round budget fixed, K growing:");
    for k in [5u64, 20, 100, 500, 2000] {
        let kf = k as f64;
        let b = Budget::new(kf * 1.2, kf * 15.0, 0.01, 0.5);
        let r = uniform_closed_form(k, &b, &profiles, &params, 2.0, 40)?;
        println!("K = {k:5}: tau* = {:2}, s = {}", r.tau, r.batch[0]);
    }
    Ok(())
}
