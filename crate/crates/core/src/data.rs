//! Datasets, client partitions, streaming arrivals and bounded buffers.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DataSample;

/// Labeled samples of a fixed feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub samples: Vec<DataSample>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, samples: Vec<DataSample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: s.dim(),
                });
            }
            if s.label < 0 || s.label as usize >= classes {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has label {} outside 0..{classes}",
                    s.label
                )));
            }
        }
        Ok(Self {
            dim,
            classes,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for s in &self.samples {
            counts[s.label as usize] += 1;
        }
        counts
    }
}

/// Gaussian class blobs with a trailing constant-1 bias feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    /// Informative feature dimension, excluding the bias coordinate.
    pub dim: usize,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the class centres around the origin.
    pub separation: f64,
    /// Within-class standard deviation.
    pub spread: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            dim: 20,
            classes: 4,
            train_per_class: 500,
            test_per_class: 200,
            separation: 1.0,
            spread: 1.0,
        }
    }
}

/// Draws a train and a test set from the same class centres.
pub fn generate_blobs(spec: &BlobSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.dim == 0 || spec.classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "blobs need a positive dimension and two classes, got dim {} and {} classes",
            spec.dim, spec.classes
        )));
    }
    if !(spec.separation > 0.0) || !(spec.spread > 0.0) {
        return Err(Error::InvalidArgument(
            "blob separation and spread must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre =
        Normal::new(0.0, spec.separation).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let noise = Normal::new(0.0, spec.spread).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let centres: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| centre.sample(&mut rng)).collect())
        .collect();
    let draw = |per_class: usize, rng: &mut ChaCha8Rng| {
        let mut samples = Vec::with_capacity(per_class * spec.classes);
        for _ in 0..per_class {
            for (c, mu) in centres.iter().enumerate() {
                let mut x: Vec<f64> = mu.iter().map(|m| m + noise.sample(rng)).collect();
                x.push(1.0);
                samples.push(DataSample::new(x, c as i32));
            }
        }
        Dataset::new(spec.dim + 1, spec.classes, samples)
    };
    let train = draw(spec.train_per_class, &mut rng)?;
    let test = draw(spec.test_per_class, &mut rng)?;
    Ok((train, test))
}

const MAGIC: &[u8; 4] = b"FLDS";
const FORMAT_VERSION: u32 = 1;

/// Writes the binary dataset format.
///
/// Layout, all little-endian: `b"FLDS"`, `u32` version (1), `u32` feature
/// dimension, `u64` sample count, `u32` class count, then `count * dim`
/// `f32` features row by row, then `count` `i32` labels.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(data.dim as u32).to_le_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    w.write_all(&(data.classes as u32).to_le_bytes())?;
    for s in &data.samples {
        for v in &s.features {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    for s in &data.samples {
        w.write_all(&s.label.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("dataset file is truncated".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

/// Reads a file written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_array::<4>(&mut r)? != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a dataset file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let dim = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let classes = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let mut features = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            row.push(f32::from_le_bytes(read_array(&mut r)?) as f64);
        }
        features.push(row);
    }
    let mut samples = Vec::with_capacity(features.len());
    for x in features {
        samples.push(DataSample::new(x, i32::from_le_bytes(read_array(&mut r)?)));
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after dataset".into()));
    }
    Dataset::new(dim, classes, samples).map_err(|e| Error::Format(e.to_string()))
}

/// How a dataset is split across clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PartitionSpec {
    Iid,
    /// Sort by label, cut into `clients * shards_per_client` shards and deal
    /// them out at random.
    LabelSkew {
        shards_per_client: usize,
    },
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec::LabelSkew {
            shards_per_client: 2,
        }
    }
}

/// Splits `dataset` into `clients` disjoint parts covering every sample.
pub fn partition_static<R: Rng>(
    dataset: &Dataset,
    clients: usize,
    spec: PartitionSpec,
    rng: &mut R,
) -> Result<Vec<Vec<DataSample>>> {
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if clients > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "{clients} clients but only {} samples",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let per_client = match spec {
        PartitionSpec::Iid => {
            order.shuffle(rng);
            1
        }
        PartitionSpec::LabelSkew { shards_per_client } => {
            if shards_per_client == 0 {
                return Err(Error::InvalidArgument(
                    "shards per client must be positive".into(),
                ));
            }
            order.sort_by_key(|i| dataset.samples[*i].label);
            shards_per_client.min(dataset.len() / clients)
        }
    };
    let shards = clients * per_client;
    let len = order.len();
    let bounds: Vec<usize> = (0..=shards).map(|j| j * len / shards).collect();
    let mut shard_ids: Vec<usize> = (0..shards).collect();
    if matches!(spec, PartitionSpec::LabelSkew { .. }) {
        shard_ids.shuffle(rng);
    }
    Ok((0..clients)
        .map(|c| {
            let mut mine: Vec<usize> = shard_ids[c * per_client..(c + 1) * per_client].to_vec();
            mine.sort_unstable();
            mine.iter()
                .flat_map(|s| order[bounds[*s]..bounds[s + 1]].iter())
                .map(|i| dataset.samples[*i].clone())
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArrivalPattern {
    Smooth,
    Burst,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassMode {
    /// Every delivery is split evenly across classes.
    Iid,
    /// One class at a time; a new class is chosen once the current one runs out.
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub pattern: ArrivalPattern,
    pub class_mode: ClassMode,
    /// Samples per interval.
    pub arrival_count: u64,
    /// Rounds per interval.
    pub interval: u64,
    /// Round of the burst (burst pattern only).
    pub burst_round: u64,
    /// Samples delivered in every non-burst round.
    pub trickle: u64,
    /// Samples delivered before the first round.
    pub initial_count: u64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            pattern: ArrivalPattern::Smooth,
            class_mode: ClassMode::Iid,
            arrival_count: 50,
            interval: 1,
            burst_round: 1,
            trickle: 0,
            initial_count: 32,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self, rounds: u64) -> Result<()> {
        if self.interval < 1 {
            return Err(Error::InvalidArgument(
                "stream interval must be at least 1".into(),
            ));
        }
        if self.pattern == ArrivalPattern::Burst && !(1..=rounds).contains(&self.burst_round) {
            return Err(Error::InvalidArgument(format!(
                "burst round {} outside 1..={rounds}",
                self.burst_round
            )));
        }
        if self.initial_count < 1 {
            return Err(Error::InvalidArgument(
                "initial delivery must hold at least one sample".into(),
            ));
        }
        Ok(())
    }

    /// Mean arrivals per round for the random pattern.
    pub fn mean_per_round(&self) -> f64 {
        self.arrival_count as f64 / self.interval as f64
    }

    /// Number of samples scheduled for round `k >= 1`.
    pub fn scheduled<R: Rng>(&self, k: u64, rng: &mut R) -> u64 {
        match self.pattern {
            ArrivalPattern::Smooth => {
                if k % self.interval == 0 {
                    self.arrival_count
                } else {
                    0
                }
            }
            ArrivalPattern::Burst => {
                if k == self.burst_round {
                    self.arrival_count
                } else {
                    self.trickle
                }
            }
            ArrivalPattern::Random => {
                let hi = (2.0 * self.mean_per_round()).round() as u64;
                rng.gen_range(0..=hi)
            }
        }
    }
}

/// Delivers one client's samples over time.
#[derive(Debug, Clone)]
pub struct ClientStream {
    cfg: StreamConfig,
    pools: Vec<VecDeque<DataSample>>,
    /// Class visiting order for continuous mode.
    order: Vec<usize>,
    cursor: usize,
    next_class: usize,
    rng: ChaCha8Rng,
    delivered: u64,
}

impl ClientStream {
    /// `class_order` is the shared continuous-mode visiting order; `rng`
    /// drives shuffling and random arrival counts for this client only.
    pub fn new(
        samples: Vec<DataSample>,
        classes: usize,
        cfg: StreamConfig,
        class_order: Vec<usize>,
        mut rng: ChaCha8Rng,
    ) -> Self {
        let mut pools = vec![Vec::new(); classes];
        for s in samples {
            let c = (s.label.max(0) as usize).min(classes - 1);
            pools[c].push(s);
        }
        let pools = pools
            .into_iter()
            .map(|mut p| {
                p.shuffle(&mut rng);
                VecDeque::from(p)
            })
            .collect();
        Self {
            cfg,
            pools,
            order: class_order,
            cursor: 0,
            next_class: 0,
            rng,
            delivered: 0,
        }
    }

    pub fn remaining(&self) -> usize {
        self.pools.iter().map(VecDeque::len).sum()
    }

    /// Samples delivered so far.
    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    /// Delivery before the first round.
    pub fn initial(&mut self) -> Vec<DataSample> {
        self.take(self.cfg.initial_count)
    }

    /// Arrivals for round `k >= 1`. Empty once the pool is exhausted.
    pub fn generate_arrivals(&mut self, k: u64) -> Vec<DataSample> {
        let n = self.cfg.scheduled(k, &mut self.rng);
        self.take(n)
    }

    fn take(&mut self, n: u64) -> Vec<DataSample> {
        let mut out = Vec::new();
        let classes = self.pools.len();
        while (out.len() as u64) < n {
            let c = match self.cfg.class_mode {
                ClassMode::Iid => {
                    let found = (0..classes)
                        .map(|o| (self.next_class + o) % classes)
                        .find(|c| !self.pools[*c].is_empty());
                    match found {
                        Some(c) => {
                            self.next_class = (c + 1) % classes;
                            c
                        }
                        None => break,
                    }
                }
                ClassMode::Continuous => {
                    while self.cursor < self.order.len()
                        && self.pools[self.order[self.cursor]].is_empty()
                    {
                        self.cursor += 1;
                    }
                    match self.order.get(self.cursor) {
                        Some(c) => *c,
                        None => break,
                    }
                }
            };
            if let Some(s) = self.pools[c].pop_front() {
                out.push(s);
            }
        }
        self.delivered += out.len() as u64;
        out
    }
}

/// Shared continuous-mode class order derived from the stream seed.
pub fn class_order(classes: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Buffer replacement rule once the buffer is full.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingPolicy {
    #[default]
    Reservoir,
    Random,
    Fifo,
}

impl std::str::FromStr for SamplingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reservoir" => Ok(Self::Reservoir),
            "random" => Ok(Self::Random),
            "fifo" => Ok(Self::Fifo),
            other => Err(Error::Config(format!(
                "unknown sampling policy `{other}` (expected reservoir, random or fifo)"
            ))),
        }
    }
}

impl std::fmt::Display for SamplingPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Reservoir => "reservoir",
            Self::Random => "random",
            Self::Fifo => "fifo",
        })
    }
}

/// Bounded per-client sample store.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T = DataSample> {
    capacity: usize,
    policy: SamplingPolicy,
    contents: VecDeque<T>,
    stream_count: u64,
}

impl<T> Buffer<T> {
    pub fn new(capacity: usize, policy: SamplingPolicy) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument(
                "buffer capacity must be at least 1".into(),
            ));
        }
        Ok(Self {
            capacity,
            policy,
            contents: VecDeque::with_capacity(capacity.min(1 << 16)),
            stream_count: 0,
        })
    }

    /// Static dataset: capacity equals the data and everything is stored.
    pub fn from_static(items: Vec<T>) -> Result<Self> {
        let mut b = Self::new(items.len(), SamplingPolicy::Fifo)?;
        b.stream_count = items.len() as u64;
        b.contents.extend(items);
        Ok(b)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> SamplingPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.contents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contents.is_empty()
    }

    /// Total arrivals ever offered, `D_i^k`.
    pub fn stream_count(&self) -> u64 {
        self.stream_count
    }

    pub fn contents(&self) -> impl Iterator<Item = &T> {
        self.contents.iter()
    }

    /// Feeds arrivals through the buffer's policy.
    pub fn update<R: Rng>(&mut self, arrivals: impl IntoIterator<Item = T>, rng: &mut R) {
        match self.policy {
            SamplingPolicy::Reservoir => reservoir_update(self, arrivals, rng),
            SamplingPolicy::Random => random_replace_update(self, arrivals, rng),
            SamplingPolicy::Fifo => fifo_update(self, arrivals),
        }
    }

    /// Uniform draw without replacement of `min(s, len)` items.
    pub fn sample_batch<R: Rng>(&self, s: usize, rng: &mut R) -> Result<Batch<'_, T>> {
        if self.contents.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if s == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        if s >= self.contents.len() {
            return Ok(Batch {
                items: self.contents.iter().collect(),
                shortfall: s > self.contents.len(),
            });
        }
        let idx = rand::seq::index::sample(rng, self.contents.len(), s);
        Ok(Batch {
            items: idx.iter().map(|i| &self.contents[i]).collect(),
            shortfall: false,
        })
    }
}

/// Reservoir rule: every arrival so far is stored with probability `B / D`.
pub fn reservoir_update<T, R: Rng>(
    buf: &mut Buffer<T>,
    arrivals: impl IntoIterator<Item = T>,
    rng: &mut R,
) {
    for x in arrivals {
        buf.stream_count += 1;
        if buf.contents.len() < buf.capacity {
            buf.contents.push_back(x);
        } else {
            let j = rng.gen_range(1..=buf.stream_count);
            if j <= buf.capacity as u64 {
                buf.contents[(j - 1) as usize] = x;
            }
        }
    }
}

/// Evicts the oldest stored item when full.
pub fn fifo_update<T>(buf: &mut Buffer<T>, arrivals: impl IntoIterator<Item = T>) {
    for x in arrivals {
        buf.stream_count += 1;
        if buf.contents.len() == buf.capacity {
            buf.contents.pop_front();
        }
        buf.contents.push_back(x);
    }
}

/// Evicts a uniformly chosen stored item when full; the newcomer always enters.
pub fn random_replace_update<T, R: Rng>(
    buf: &mut Buffer<T>,
    arrivals: impl IntoIterator<Item = T>,
    rng: &mut R,
) {
    for x in arrivals {
        buf.stream_count += 1;
        if buf.contents.len() < buf.capacity {
            buf.contents.push_back(x);
        } else {
            let j = rng.gen_range(0..buf.contents.len());
            buf.contents[j] = x;
        }
    }
}

/// Result of [`Buffer::sample_batch`].
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<'a, T> {
    pub items: Vec<&'a T>,
    /// The buffer held fewer items than requested.
    pub shortfall: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn labeled(classes: usize, per_class: usize) -> Dataset {
        let samples = (0..classes * per_class)
            .map(|i| DataSample::new(vec![i as f64, 1.0], (i % classes) as i32))
            .collect();
        Dataset::new(2, classes, samples).unwrap()
    }

    #[test]
    fn single_client_gets_everything() {
        let d = labeled(3, 10);
        let parts = partition_static(&d, 1, PartitionSpec::default(), &mut rng(1)).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].len(), 30);
    }

    #[test]
    fn one_shard_per_client_is_single_class() {
        let d = labeled(10, 20);
        let parts = partition_static(
            &d,
            10,
            PartitionSpec::LabelSkew {
                shards_per_client: 1,
            },
            &mut rng(2),
        )
        .unwrap();
        for p in &parts {
            assert_eq!(p.len(), 20);
            assert!(p.iter().all(|s| s.label == p[0].label));
        }
    }

    #[test]
    fn partitions_cover_the_dataset() {
        let d = labeled(4, 37);
        for spec in [
            PartitionSpec::Iid,
            PartitionSpec::LabelSkew {
                shards_per_client: 2,
            },
        ] {
            let parts = partition_static(&d, 6, spec, &mut rng(3)).unwrap();
            let mut ids: Vec<i64> = parts
                .iter()
                .flatten()
                .map(|s| s.features[0] as i64)
                .collect();
            ids.sort_unstable();
            assert_eq!(ids, (0..148).collect::<Vec<_>>());
        }
        assert!(partition_static(&d, 149, PartitionSpec::Iid, &mut rng(3)).is_err());
    }

    #[test]
    fn blobs_have_bias_and_balanced_classes() {
        let (train, test) = generate_blobs(&BlobSpec::default(), 7).unwrap();
        assert_eq!(train.dim, 21);
        assert_eq!(train.class_counts(), vec![500; 4]);
        assert_eq!(test.class_counts(), vec![200; 4]);
        assert!(train.samples.iter().all(|s| s.features[20] == 1.0));
        let (again, _) = generate_blobs(&BlobSpec::default(), 7).unwrap();
        assert_eq!(train, again);
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.flds");
        let d = Dataset::new(
            2,
            3,
            vec![
                DataSample::new(vec![0.5, -1.25], 2),
                DataSample::new(vec![3.0, 1.0], 0),
            ],
        )
        .unwrap();
        write_dataset(&path, &d).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), d);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 4 + 4 * 4 + 2 * 4);
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format(_))));
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format(_))));
    }

    fn stream_cfg(pattern: ArrivalPattern) -> StreamConfig {
        StreamConfig {
            pattern,
            class_mode: ClassMode::Iid,
            arrival_count: 5000,
            interval: 100,
            burst_round: 500,
            trickle: 0,
            initial_count: 1,
            seed: 0,
        }
    }

    #[test]
    fn smooth_and_burst_schedules() {
        let mut r = rng(0);
        let smooth = stream_cfg(ArrivalPattern::Smooth);
        assert_eq!(smooth.scheduled(100, &mut r), 5000);
        assert_eq!(smooth.scheduled(99, &mut r), 0);
        let burst = stream_cfg(ArrivalPattern::Burst);
        assert_eq!(burst.scheduled(499, &mut r), 0);
        assert_eq!(burst.scheduled(500, &mut r), 5000);
        let random = stream_cfg(ArrivalPattern::Random);
        let draws: Vec<u64> = (1..=2000).map(|k| random.scheduled(k, &mut r)).collect();
        assert!(draws.iter().all(|d| *d <= 100));
        let mean = draws.iter().sum::<u64>() as f64 / 2000.0;
        assert!((mean - 50.0).abs() < 2.0, "{mean}");
    }

    #[test]
    fn iid_mode_splits_classes_evenly() {
        let d = labeled(10, 600);
        let mut s = ClientStream::new(
            d.samples,
            10,
            stream_cfg(ArrivalPattern::Smooth),
            class_order(10, 0),
            rng(4),
        );
        let batch = s.generate_arrivals(100);
        assert_eq!(batch.len(), 5000);
        let mut counts = [0; 10];
        for x in &batch {
            counts[x.label as usize] += 1;
        }
        assert_eq!(counts, [500; 10]);
        assert!(s.generate_arrivals(101).is_empty());
        assert_eq!(s.delivered(), 5000);
        assert_eq!(s.generate_arrivals(200).len(), 1000);
        assert!(s.generate_arrivals(300).is_empty());
    }

    #[test]
    fn continuous_mode_follows_class_order() {
        let d = labeled(3, 4);
        let cfg = StreamConfig {
            arrival_count: 3,
            interval: 1,
            class_mode: ClassMode::Continuous,
            ..stream_cfg(ArrivalPattern::Smooth)
        };
        let order = vec![2, 0, 1];
        let mut s = ClientStream::new(d.samples, 3, cfg, order, rng(5));
        let labels: Vec<i32> = (1..=4)
            .flat_map(|k| s.generate_arrivals(k))
            .map(|x| x.label)
            .collect();
        assert_eq!(labels, vec![2, 2, 2, 2, 0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn reservoir_keeps_short_streams() {
        let mut b = Buffer::new(10, SamplingPolicy::Reservoir).unwrap();
        b.update(0..7, &mut rng(0));
        assert_eq!(b.len(), 7);
        assert_eq!(b.stream_count(), 7);
        b.update(7..30, &mut rng(0));
        assert_eq!(b.len(), 10);
        assert_eq!(b.stream_count(), 30);
    }

    #[test]
    fn reservoir_single_slot_is_fair() {
        let trials = 10_000;
        let mut r = rng(9);
        let mut second = 0;
        for _ in 0..trials {
            let mut b = Buffer::new(1, SamplingPolicy::Reservoir).unwrap();
            b.update([1, 2], &mut r);
            if b.contents().next() == Some(&2) {
                second += 1;
            }
        }
        let sigma = (trials as f64 * 0.25).sqrt();
        assert!((second as f64 - 5000.0).abs() <= 3.0 * sigma, "{second}");
    }

    #[test]
    fn fifo_and_random_replacement() {
        let mut b = Buffer::new(3, SamplingPolicy::Fifo).unwrap();
        b.update(1..=5, &mut rng(0));
        assert_eq!(b.contents().copied().collect::<Vec<_>>(), vec![3, 4, 5]);
        let mut r = rng(1);
        let mut b = Buffer::new(3, SamplingPolicy::Random).unwrap();
        for x in 0..100 {
            b.update([x], &mut r);
            assert!(b.contents().any(|v| *v == x));
            assert!(b.len() <= 3);
        }
    }

    #[test]
    fn batch_sampling() {
        let b = Buffer::from_static((0..5).collect::<Vec<_>>()).unwrap();
        let all = b.sample_batch(5, &mut rng(0)).unwrap();
        assert_eq!(
            all.items.iter().map(|x| **x).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4]
        );
        assert!(!all.shortfall);
        let over = b.sample_batch(8, &mut rng(0)).unwrap();
        assert_eq!(over.items.len(), 5);
        assert!(over.shortfall);
        let empty: Buffer<u8> = Buffer::new(4, SamplingPolicy::Reservoir).unwrap();
        assert!(matches!(
            empty.sample_batch(1, &mut rng(0)),
            Err(Error::EmptyBatch)
        ));

        let mut r = rng(3);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            counts[*b.sample_batch(1, &mut r).unwrap().items[0]] += 1;
        }
        let sigma = (draws as f64 * 0.2 * 0.8).sqrt();
        for c in counts {
            assert!((c as f64 - 2000.0).abs() <= 3.0 * sigma, "{counts:?}");
        }
        let pick = b.sample_batch(3, &mut r).unwrap();
        let mut seen: Vec<usize> = pick.items.iter().map(|x| **x).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 3);
    }
}
