//! Feeds a continuous class stream into bounded buffers under each sampling
//! policy and prints the class mix each one retains.
//!
//! ```bash
//! cargo run --example streaming_buffers
//! ```

use fedbatch::data::{
    class_order, generate_blobs, BlobSpec, Buffer, ClassMode, ClientStream, SamplingPolicy,
    StreamConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fedbatch::Result<()> {
    let (train, _) = generate_blobs(
        &BlobSpec {
            classes: 4,
            train_per_class: 100,
            ..BlobSpec::default()
        },
        3,
    )?;
    let cfg = StreamConfig {
        class_mode: ClassMode::Continuous,
        arrival_count: 10,
        initial_count: 10,
        ..StreamConfig::default()
    };
    let order = class_order(train.classes, 3);
    for policy in [
        SamplingPolicy::Reservoir,
        SamplingPolicy::Random,
        SamplingPolicy::Fifo,
    ] {
        let mut stream = ClientStream::new(
            train.samples.clone(),
            train.classes,
            cfg,
            order.clone(),
            ChaCha8Rng::seed_from_u64(1),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut buffer = Buffer::new(40, policy)?;
        buffer.update(stream.initial(), &mut rng);
        for k in 1..=39 {
            buffer.update(stream.generate_arrivals(k), &mut rng);
        }
        let mut mix = vec![0; train.classes];
        for x in buffer.contents() {
            mix[x.label as usize] += 1;
        }
        let batch = buffer.sample_batch(8, &mut rng)?;
        println!(
            "{:<9} seen {:3}, kept {:2}, class mix {mix:?}, batch of {}",
            policy.to_string(),
            buffer.stream_count(),
            buffer.len(),
            batch.items.len()
        );
    }
    Ok(())
}
