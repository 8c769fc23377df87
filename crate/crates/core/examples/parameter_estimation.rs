//! Estimates curvature constants, gradient variance and divergence the way
//! clients and the server do during online training.
//!
//! ```bash
//! cargo run --example parameter_estimation
//! ```

use fedbatch::data::{generate_blobs, partition_static, BlobSpec, Buffer, PartitionSpec};
use fedbatch::estimation::{
    aggregate_global_params, estimate_client_params, estimate_divergence, estimate_m,
    CurvatureEstimate,
};
use fedbatch::model::{batch_gradient, local_update, LossKind, LossModel};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fedbatch::Result<()> {
    let (train, _) = generate_blobs(&BlobSpec::default(), 5)?;
    let model = LossModel::new(LossKind::SquaredSvm, 0.1, train.classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let parts = partition_static(&train, 3, PartitionSpec::default(), &mut rng)?;
    let w = model.init(train.dim);

    let mut estimates = Vec::new();
    let mut grads = Vec::new();
    let mut weights = Vec::new();
    for (i, part) in parts.iter().enumerate() {
        let batch: Vec<_> = part.choose_multiple(&mut rng, 32).cloned().collect();
        let local = local_update(&w, &batch, 0.005, &model)?;
        let est = estimate_client_params(
            &w,
            &local,
            &batch,
            &model,
            CurvatureEstimate::new(0.5, 1.0, 1.0),
        )?;
        let m = estimate_m(&Buffer::from_static(part.clone())?, &w, &model, &mut rng)?;
        println!(
            "client {i}: c {:.3}, rho {:.3}, beta {:.3}, M {m:.2}",
            est.c, est.rho, est.beta
        );
        estimates.push(est);
        grads.push(batch_gradient(&w, &batch, &model)?);
        weights.push(part.len() as f64);
    }
    let global = aggregate_global_params(&estimates, &weights)?;
    let (per_client, delta) = estimate_divergence(&grads, &weights)?;
    println!(
        "server: c {:.3}, rho {:.3}, beta {:.3}",
        global.c, global.rho, global.beta
    );
    println!("divergence per client {per_client:.3?}, weighted {delta:.3}");
    Ok(())
}
