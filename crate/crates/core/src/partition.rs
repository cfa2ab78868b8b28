//! Non-IID sharding of a labelled dataset.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("dataset is empty".into()));
        }
        let dim = samples[0].features.len();
        for s in &samples {
            if s.label >= num_classes {
                return Err(Error::InvalidInput(format!("label {} >= {num_classes} classes", s.label)));
            }
            if s.features.len() != dim {
                return Err(Error::InvalidInput("inconsistent feature dimensions".into()));
            }
        }
        Ok(Self { samples, num_classes })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples[0].features.len()
    }

    /// Sample indices grouped by label.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.label].push(i);
        }
        out
    }
}

/// Normalised label histogram of a shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput("probabilities must lie in [0, 1]".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Splits `data` across `num_clients` with per-class Dirichlet(β) proportions.
///
/// Client `i` receives `⌊p_{k,i}·n_k⌋` samples of class `k`; the leftovers of
/// each class go to uniformly drawn clients. A client left without samples
/// is topped up by moving one sample from a client holding more than one,
/// trying classes round-robin, so the shards stay a partition.
pub fn dirichlet_partition(data: &LabeledDataset, num_clients: usize, beta: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if data.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    if num_clients == 0 {
        return Err(Error::InvalidConfig("need at least one client".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidConfig(format!("beta must be positive, got {beta}")));
    }
    if data.len() < num_clients {
        return Err(Error::InvalidInput(format!(
            "{} samples cannot fill {num_clients} non-empty shards",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); num_clients];

    for mut idx in data.class_indices() {
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let props = sample_dirichlet(&gamma, num_clients, &mut rng);
        let n_k = idx.len();
        let mut next = 0;
        for (client, p) in props.iter().enumerate() {
            let take = ((p * n_k as f64).floor() as usize).min(n_k - next);
            shards[client].extend_from_slice(&idx[next..next + take]);
            next += take;
        }
        for &i in &idx[next..] {
            shards[rng.gen_range(0..num_clients)].push(i);
        }
    }

    repair_empty_shards(data, &mut shards, &mut rng)?;
    Ok(shards)
}

fn sample_dirichlet(gamma: &Gamma<f64>, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|d| d / total).collect()
    } else {
        // every draw underflowed: all mass on one client
        let mut out = vec![0.0; n];
        out[rng.gen_range(0..n)] = 1.0;
        out
    }
}

fn repair_empty_shards(data: &LabeledDataset, shards: &mut [Vec<usize>], rng: &mut ChaCha8Rng) -> Result<()> {
    let k = data.num_classes();
    for client in 0..shards.len() {
        if !shards[client].is_empty() {
            continue;
        }
        let mut moved = false;
        for offset in 0..k {
            let class = (client + offset) % k;
            let donors: Vec<(usize, usize)> = shards
                .iter()
                .enumerate()
                .filter(|(_, s)| s.len() > 1)
                .flat_map(|(c, s)| {
                    s.iter()
                        .enumerate()
                        .filter(|(_, &i)| data.samples()[i].label == class)
                        .map(move |(pos, _)| (c, pos))
                })
                .collect();
            if let Some(&(donor, pos)) = donors.choose(rng) {
                let sample = shards[donor].swap_remove(pos);
                shards[client].push(sample);
                moved = true;
                break;
            }
        }
        if !moved {
            return Err(Error::InvalidInput("no sample available to fill an empty shard".into()));
        }
    }
    Ok(())
}

/// Label histogram of `shard`, normalised by its size.
pub fn label_distribution(shard: &[usize], data: &LabeledDataset) -> Result<LabelDistribution> {
    if shard.is_empty() {
        return Err(Error::DegenerateShard);
    }
    let mut counts = vec![0usize; data.num_classes()];
    for &i in shard {
        let s = data
            .samples()
            .get(i)
            .ok_or_else(|| Error::InvalidInput(format!("sample index {i} out of range")))?;
        counts[s.label] += 1;
    }
    let n = shard.len() as f64;
    Ok(LabelDistribution {
        probs: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// Gaussian blobs, one per class, with class centers drawn once per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the class-center distribution.
    pub center_scale: f64,
    /// Within-class standard deviation.
    pub spread: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            feature_dim: 16,
            train_per_class: 200,
            test_per_class: 50,
            center_scale: 2.0,
            spread: 1.0,
        }
    }
}

/// Returns `(train, test)` drawn from the same class centers.
pub fn synthetic_blobs(spec: &BlobSpec, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if spec.num_classes == 0 || spec.feature_dim == 0 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::InvalidConfig("blob dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers_dist = Normal::new(0.0, spec.center_scale).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let noise = Normal::new(0.0, spec.spread).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.feature_dim).map(|_| centers_dist.sample(&mut rng)).collect())
        .collect();
    let mut draw = |per_class: usize| {
        let mut out = Vec::with_capacity(per_class * spec.num_classes);
        for (label, c) in centers.iter().enumerate() {
            for _ in 0..per_class {
                out.push(Sample {
                    features: c.iter().map(|m| m + noise.sample(&mut rng)).collect(),
                    label,
                });
            }
        }
        out
    };
    let train = draw(spec.train_per_class);
    let test = draw(spec.test_per_class);
    Ok((
        LabeledDataset::new(train, spec.num_classes)?,
        LabeledDataset::new(test, spec.num_classes)?,
    ))
}

fn idx_header(bytes: &[u8], expected_type: u8) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != expected_type {
        return Err(Error::Serialization("not an unsigned-byte IDX file".into()));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Serialization("truncated IDX header".into()));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let payload: usize = dims.iter().product();
    if bytes.len() != header + payload {
        return Err(Error::Serialization(format!(
            "IDX payload is {} bytes, header declares {payload}",
            bytes.len() - header
        )));
    }
    Ok((dims, header))
}

/// Parses an IDX image file and matching label file (MNIST layout, unsigned
/// bytes). Pixel values are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8], num_classes: usize) -> Result<LabeledDataset> {
    let (img_dims, img_off) = idx_header(images, 0x08)?;
    let (lbl_dims, lbl_off) = idx_header(labels, 0x08)?;
    if img_dims.is_empty() || lbl_dims.len() != 1 || img_dims[0] != lbl_dims[0] {
        return Err(Error::Serialization("image and label counts differ".into()));
    }
    let count = img_dims[0];
    let per_image: usize = img_dims[1..].iter().product();
    let samples = (0..count)
        .map(|i| {
            let start = img_off + i * per_image;
            Sample {
                features: images[start..start + per_image].iter().map(|&b| f64::from(b) / 255.0).collect(),
                label: labels[lbl_off + i] as usize,
            }
        })
        .collect();
    LabeledDataset::new(samples, num_classes)
}

pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<LabeledDataset> {
    parse_idx(&fs::read(images)?, &fs::read(labels)?, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_only(labels: &[usize], k: usize) -> LabeledDataset {
        LabeledDataset::new(
            labels.iter().map(|&label| Sample { features: vec![0.0], label }).collect(),
            k,
        )
        .unwrap()
    }

    fn blobs(seed: u64) -> LabeledDataset {
        synthetic_blobs(&BlobSpec::default(), seed).unwrap().0
    }

    fn assert_partition(shards: &[Vec<usize>], n: usize) {
        let mut all: Vec<usize> = shards.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn label_distribution_examples() {
        let d = labels_only(&[0, 0, 1, 1], 2);
        assert_eq!(label_distribution(&[0, 1, 2, 3], &d).unwrap().probs(), &[0.5, 0.5]);
        assert_eq!(label_distribution(&[2, 3], &d).unwrap().probs(), &[0.0, 1.0]);
        let d4 = labels_only(&[0, 0, 0, 1], 4);
        assert_eq!(label_distribution(&[0, 1, 2, 3], &d4).unwrap().probs(), &[0.75, 0.25, 0.0, 0.0]);
        assert!(matches!(label_distribution(&[], &d), Err(Error::DegenerateShard)));
    }

    #[test]
    fn single_client_gets_everything() {
        let d = blobs(1);
        for beta in [0.1, 1.0, 100.0] {
            let shards = dirichlet_partition(&d, 1, beta, 3).unwrap();
            assert_eq!(shards.len(), 1);
            assert_partition(&shards, d.len());
        }
    }

    #[test]
    fn partition_complete_disjoint_and_conserving() {
        let d = blobs(2);
        for seed in 0..10 {
            for &(n, beta) in &[(4, 0.1), (8, 1.0), (13, 0.5)] {
                let shards = dirichlet_partition(&d, n, beta, seed).unwrap();
                assert_eq!(shards.len(), n);
                assert!(shards.iter().all(|s| !s.is_empty()));
                assert_partition(&shards, d.len());
                for (k, class) in d.class_indices().iter().enumerate() {
                    let total: usize = shards
                        .iter()
                        .map(|s| s.iter().filter(|&&i| d.samples()[i].label == k).count())
                        .sum();
                    assert_eq!(total, class.len());
                }
            }
        }
    }

    #[test]
    fn same_seed_same_partition() {
        let d = blobs(3);
        assert_eq!(
            dirichlet_partition(&d, 8, 0.5, 42).unwrap(),
            dirichlet_partition(&d, 8, 0.5, 42).unwrap()
        );
    }

    #[test]
    fn large_beta_is_nearly_uniform() {
        let d = labels_only(&[0; 400], 1);
        let mut hits = 0;
        for seed in 0..20 {
            let shards = dirichlet_partition(&d, 4, 10_000.0, seed).unwrap();
            if shards.iter().all(|s| (s.len() as f64 - 100.0).abs() <= 10.0) {
                hits += 1;
            }
        }
        assert_eq!(hits, 20);
    }

    fn mean_pairwise_l1(d: &LabeledDataset, beta: f64, seed: u64) -> f64 {
        let shards = dirichlet_partition(d, 8, beta, seed).unwrap();
        let dists: Vec<LabelDistribution> = shards.iter().map(|s| label_distribution(s, d).unwrap()).collect();
        let mut total = 0.0;
        let mut pairs = 0.0;
        for i in 0..dists.len() {
            for j in i + 1..dists.len() {
                total += dists[i].probs().iter().zip(dists[j].probs()).map(|(a, b)| (a - b).abs()).sum::<f64>();
                pairs += 1.0;
            }
        }
        total / pairs
    }

    #[test]
    fn smaller_beta_is_more_heterogeneous() {
        let d = blobs(4);
        let skewed: f64 = (0..20).map(|s| mean_pairwise_l1(&d, 0.1, s)).sum::<f64>() / 20.0;
        let mild: f64 = (0..20).map(|s| mean_pairwise_l1(&d, 1.0, s)).sum::<f64>() / 20.0;
        assert!(skewed > mild, "β=0.1 gives {skewed}, β=1.0 gives {mild}");
    }

    #[test]
    fn rejects_bad_arguments() {
        let d = blobs(5);
        assert!(dirichlet_partition(&d, 0, 1.0, 0).is_err());
        assert!(dirichlet_partition(&d, 4, 0.0, 0).is_err());
        assert!(LabeledDataset::new(Vec::new(), 2).is_err());
    }

    #[test]
    fn idx_parsing() {
        let mut images = vec![0, 0, 0x08, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        images.extend([0, 255, 51, 102, 255, 0, 0, 0]);
        let labels = vec![0, 0, 0x08, 1, 0, 0, 0, 2, 7, 3];
        let d = parse_idx(&images, &labels, 10).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.samples()[0].features, vec![0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.samples()[1].label, 3);
        assert!(parse_idx(&images[..images.len() - 1], &labels, 10).is_err());
    }
}
