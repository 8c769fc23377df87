//! Local SGD on two label-skewed clients followed by data-weighted averaging.
//!
//! ```bash
//! cargo run --example local_training
//! ```

use fedbatch::data::{generate_blobs, partition_static, BlobSpec, PartitionSpec};
use fedbatch::model::{aggregate, batch_loss, local_update, LossKind, LossModel};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fedbatch::Result<()> {
    let spec = BlobSpec {
        dim: 10,
        classes: 3,
        train_per_class: 200,
        test_per_class: 50,
        ..BlobSpec::default()
    };
    let (train, test) = generate_blobs(&spec, 7)?;
    let model = LossModel::new(LossKind::SquaredSvm, 0.1, train.classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let parts = partition_static(
        &train,
        2,
        PartitionSpec::LabelSkew {
            shards_per_client: 2,
        },
        &mut rng,
    )?;

    let mut w = model.init(train.dim);
    for round in 1..=20 {
        let mut locals = Vec::new();
        let mut weights = Vec::new();
        for part in &parts {
            let mut local = w.clone();
            for _ in 0..4 {
                let batch: Vec<_> = part.choose_multiple(&mut rng, 16).collect();
                local = local_update(&local, &batch, 0.01, &model)?;
            }
            locals.push(local);
            weights.push(part.len() as f64);
        }
        w = aggregate(&locals, &weights)?;
        if round % 5 == 0 {
            let acc = test
                .samples
                .iter()
                .filter(|x| model.is_correct(&w, x))
                .count() as f64
                / test.len() as f64;
            println!(
                "round {round:2}: train loss {:.4}, test accuracy {acc:.3}",
                batch_loss(&w, &train.samples, &model)?
            );
        }
    }
    Ok(())
}
