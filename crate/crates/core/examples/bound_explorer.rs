//! Evaluates the convergence bound and the uniform-batch objective over tau.
//!
//! ```bash
//! cargo run --example bound_explorer
//! ```

use fedbatch::bounds::{
    contraction_q, cumulative_bound, f_tau, local_bias_h, AssumptionParams, DataStats,
};
use fedbatch::optimizer::TauCurve;
use fedbatch::system::{Budget, ClientProfile};

fn main() -> fedbatch::Result<()> {
    let params = AssumptionParams::new(1.0, 1.0, 0.5, 0.1, 0.005);
    params.validate()?;
    println!("q = {:.6}", contraction_q(&params)?);
    for tau in [1, 2, 5, 10, 20] {
        println!("h({tau:2}) = {:.3e}", local_bias_h(tau, &params)?);
    }

    let profiles = vec![
        ClientProfile::new(100.0, 1.0, 400, 110.0),
        ClientProfile::new(200.0, 1.5, 400, 120.0),
        ClientProfile::new(400.0, 2.0, 400, 130.0),
    ];
    let stats = DataStats::from_profiles(&profiles);
    for s in [8.0, 32.0, 128.0] {
        let g = cumulative_bound(100, 4, &[s; 3], &params, &stats, 2.0)?;
        println!("K = 100, tau = 4, s = {s:>5}: bound {g:.5}");
    }

    let rounds = 100;
    let budget = Budget::new(60.0, 2000.0, 0.0005, 0.3);
    let curve = TauCurve::uniform(rounds, &budget, &profiles, &params, 2.0)?;
    println!("\n tau   f(tau)     slope");
    for tau in (1..=40).step_by(3) {
        println!(
            "{tau:4}  {:.5}  {:+.2e}",
            f_tau(tau, rounds, &budget, &profiles, &params, 2.0)?,
            curve.derivative(tau as f64)
        );
    }
    println!(
        "stationary point {:.3}, best integer tau {}",
        curve.stationary_point(40),
        curve.best_integer(40)
    );
    Ok(())
}
