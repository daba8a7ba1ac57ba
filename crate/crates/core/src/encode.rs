//! Dataset ingestion and spike encoding.
//!
//! Real-valued features in `[0, 1]` become Bernoulli spike trains (rate
//! coding), and a synthetic prototype task provides a desk-scale labeled
//! classification problem. All encoding is seed-deterministic and
//! independent of iteration order: every sample draws from its own derived
//! stream.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lif::SpikeTrain;
use crate::seed::derive_seed;

/// Labeled spike samples sharing one width and timestep count.
#[derive(Clone, Debug)]
pub struct LabeledSpikeDataset {
    samples: Vec<(SpikeTrain, usize)>,
    n_classes: usize,
    width: usize,
    timesteps: usize,
}

impl LabeledSpikeDataset {
    pub fn new(samples: Vec<(SpikeTrain, usize)>, n_classes: usize) -> Result<Self> {
        let (width, timesteps) = match samples.first() {
            Some((train, _)) => (train.width(), train.timesteps()),
            None => (0, 0),
        };
        for (i, (train, label)) in samples.iter().enumerate() {
            if train.width() != width || train.timesteps() != timesteps {
                return Err(Error::domain(format!("sample {i} has a mismatched shape")));
            }
            if *label >= n_classes {
                return Err(Error::domain(format!(
                    "sample {i} label {label} exceeds class count {n_classes}"
                )));
            }
        }
        Ok(LabeledSpikeDataset { samples, n_classes, width, timesteps })
    }

    pub fn empty() -> Self {
        LabeledSpikeDataset { samples: Vec::new(), n_classes: 0, width: 0, timesteps: 0 }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn get(&self, i: usize) -> &(SpikeTrain, usize) {
        &self.samples[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &(SpikeTrain, usize)> {
        self.samples.iter()
    }

    pub fn samples(&self) -> &[(SpikeTrain, usize)] {
        &self.samples
    }
}

/// Bernoulli rate coding: entry `(t, i)` spikes with probability
/// `features[i]`, drawn from a generator seeded with `seed`.
pub fn rate_encode(features: &[f64], timesteps: usize, seed: u64) -> Result<SpikeTrain> {
    if features.is_empty() {
        return Err(Error::domain("rate_encode needs at least one feature"));
    }
    if timesteps < 1 {
        return Err(Error::domain("rate_encode needs at least one timestep"));
    }
    for (i, &f) in features.iter().enumerate() {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::domain(format!(
                "feature {i} is {f}, outside the unit interval"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = SpikeTrain::zeros(timesteps, features.len());
    for t in 0..timesteps {
        for (i, &p) in features.iter().enumerate() {
            // gen::<f64>() lies in [0, 1), so p = 0 never fires and p = 1 always does.
            train.set(t, i, rng.gen::<f64>() < p);
        }
    }
    Ok(train)
}

/// Deterministic class prototypes: class 0 is a random pattern, and each
/// following class starts random and greedily flips bits while that strictly
/// increases its minimum Hamming distance to the earlier prototypes. Two
/// classes therefore end up as complements.
fn class_prototypes(n_classes: usize, width: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut protos: Vec<Vec<u8>> = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let mut cand: Vec<u8> = (0..width).map(|_| rng.gen::<bool>() as u8).collect();
        if !protos.is_empty() {
            loop {
                let mut improved = false;
                for bit in 0..width {
                    let before = min_hamming(&cand, &protos);
                    cand[bit] ^= 1;
                    if min_hamming(&cand, &protos) > before {
                        improved = true;
                    } else {
                        cand[bit] ^= 1;
                    }
                }
                if !improved {
                    break;
                }
            }
        }
        protos.push(cand);
    }
    protos
}

fn min_hamming(pattern: &[u8], others: &[Vec<u8>]) -> usize {
    others
        .iter()
        .map(|o| pattern.iter().zip(o).filter(|(a, b)| a != b).count())
        .min()
        .unwrap_or(usize::MAX)
}

/// Synthetic classification task: per-class binary prototypes, each sample a
/// noisy copy (every bit flipped independently with `flip_noise`) repeated
/// across all timesteps. Samples are interleaved by class so in-order
/// batches stay balanced.
pub fn synthetic_patterns(
    n_classes: usize,
    width: usize,
    timesteps: usize,
    flip_noise: f64,
    count_per_class: usize,
    seed: u64,
) -> Result<LabeledSpikeDataset> {
    if n_classes == 0 {
        return Err(Error::domain("need at least one class"));
    }
    if width < 64 && n_classes as u128 > (1u128 << width) {
        return Err(Error::domain(format!(
            "{n_classes} classes cannot have distinct prototypes of width {width}"
        )));
    }
    if !(0.0..0.5).contains(&flip_noise) {
        return Err(Error::domain(format!("flip_noise must lie in [0, 0.5), got {flip_noise}")));
    }
    let protos = class_prototypes(n_classes, width, derive_seed(seed, 0));
    let mut samples = Vec::with_capacity(n_classes * count_per_class);
    for idx in 0..count_per_class {
        for (c, proto) in protos.iter().enumerate() {
            let sample_seed = derive_seed(seed, 1 + (idx * n_classes + c) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            let bits: Vec<u8> = proto
                .iter()
                .map(|&b| if rng.gen::<f64>() < flip_noise { b ^ 1 } else { b })
                .collect();
            let train = SpikeTrain::from_fn(timesteps, width, |_, i| bits[i] != 0);
            samples.push((train, c));
        }
    }
    LabeledSpikeDataset::new(samples, n_classes)
}

/// Train/eval pair drawn from one prototype set: the first
/// `train_per_class` noisy copies per class form the training split, the
/// next `eval_per_class` the evaluation split. Sharing the prototypes keeps
/// class semantics identical across the two splits.
pub fn synthetic_patterns_split(
    n_classes: usize,
    width: usize,
    timesteps: usize,
    flip_noise: f64,
    train_per_class: usize,
    eval_per_class: usize,
    seed: u64,
) -> Result<(LabeledSpikeDataset, LabeledSpikeDataset)> {
    let all = synthetic_patterns(
        n_classes,
        width,
        timesteps,
        flip_noise,
        train_per_class + eval_per_class,
        seed,
    )?;
    let cut = train_per_class * n_classes;
    let train: Vec<_> = all.samples()[..cut].to_vec();
    let eval: Vec<_> = all.samples()[cut..].to_vec();
    Ok((
        LabeledSpikeDataset::new(train, n_classes)?,
        LabeledSpikeDataset::new(eval, n_classes)?,
    ))
}

/// Unlabeled random spike activity at a fixed firing probability, wrapped as
/// a single-class dataset. Used for statistics estimation and the
/// equivalent-network experiments.
pub fn random_spike_dataset(
    count: usize,
    width: usize,
    timesteps: usize,
    fire_probability: f64,
    seed: u64,
) -> Result<LabeledSpikeDataset> {
    let features = vec![fire_probability; width];
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let train = rate_encode(&features, timesteps, derive_seed(seed, i as u64))?;
        samples.push((train, 0));
    }
    LabeledSpikeDataset::new(samples, 1)
}

/// Loads rows of comma-separated features with a trailing integer label and
/// rate-encodes each row. Features must already be scaled to `[0, 1]`.
pub fn load_feature_csv(
    path: impl AsRef<Path>,
    timesteps: usize,
    seed: u64,
) -> Result<LabeledSpikeDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_feature_csv(&text, timesteps, seed)
}

/// CSV body parser behind [`load_feature_csv`].
pub fn parse_feature_csv(text: &str, timesteps: usize, seed: u64) -> Result<LabeledSpikeDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_reader(text.as_bytes());

    let mut samples = Vec::new();
    let mut n_classes = 0usize;
    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx + 1;
        let record = record.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if record.len() < 2 {
            return Err(Error::Parse {
                line,
                msg: format!("need at least one feature and a label, got {} fields", record.len()),
            });
        }
        let n_features = record.len() - 1;
        let mut features = Vec::with_capacity(n_features);
        for (col, field) in record.iter().take(n_features).enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("column {}: '{}' is not a number", col + 1, field),
            })?;
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::domain(format!(
                    "line {line} column {}: feature {value} outside [0, 1]",
                    col + 1
                )));
            }
            features.push(value);
        }
        let label_field = record.get(n_features).unwrap_or("");
        let label: usize = label_field.trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("label column: '{label_field}' is not a nonnegative integer"),
        })?;
        n_classes = n_classes.max(label + 1);
        let train = rate_encode(&features, timesteps, derive_seed(seed, row_idx as u64))?;
        samples.push((train, label));
    }
    if samples.is_empty() {
        return Ok(LabeledSpikeDataset::empty());
    }
    LabeledSpikeDataset::new(samples, n_classes)
}
