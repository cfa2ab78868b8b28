//! One-shot federated K-Means++ over peer label distributions.
//!
//! Seeding and assignment run once on the plaintext distributions; each
//! cluster's final centroid is the Paillier-aggregated mean of its members'
//! encrypted distributions. No refinement iterations follow.

use std::collections::BTreeMap;

use rand::{CryptoRng, Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::dp;
use crate::error::{Error, Result};
use crate::paillier::{self, PaillierKeyPair};
use crate::partition::LabelDistribution;
use crate::PeerId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub assignments: BTreeMap<PeerId, usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Number of assign-to-nearest passes performed; always 1.
    pub assignment_passes: u32,
}

impl ClusterAssignment {
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_of(&self, peer: PeerId) -> Option<usize> {
        self.assignments.get(&peer).copied()
    }

    pub fn members(&self, cluster: usize) -> Vec<PeerId> {
        self.assignments
            .iter()
            .filter(|(_, &c)| c == cluster)
            .map(|(&p, _)| p)
            .collect()
    }

    pub fn membership(&self) -> BTreeMap<usize, Vec<PeerId>> {
        (0..self.num_clusters()).map(|c| (c, self.members(c))).collect()
    }
}

/// Optional noise on the distributions used for seeding and assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignmentNoise {
    pub clip: f64,
    pub sigma: f64,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Picks `k` centroids from `points`: the first uniformly, each next one with
/// probability proportional to its squared distance to the nearest centroid
/// chosen so far. If every remaining point coincides with a centroid the
/// draw falls back to uniform.
pub fn kmeanspp_seed<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    Ok(kmeanspp_seed_indices(points, k, rng)?
        .into_iter()
        .map(|i| points[i].clone())
        .collect())
}

pub fn kmeanspp_seed_indices<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::InvalidInput("no points to seed from".into()));
    }
    if k == 0 || k > points.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot seed {k} centroids from {} points",
            points.len()
        )));
    }
    check_dims(points)?;
    let mut chosen = vec![rng.gen_range(0..points.len())];
    let mut nearest: Vec<f64> = points.iter().map(|p| squared_distance(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target just past the final sum
            pick.unwrap_or_else(|| nearest.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            rng.gen_range(0..points.len())
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(squared_distance(p, &points[next]));
        }
    }
    Ok(chosen)
}

fn check_dims(points: &[Vec<f64>]) -> Result<()> {
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::InvalidInput("points differ in dimension".into()));
    }
    Ok(())
}

/// Index of the nearest centroid by squared Euclidean distance; ties go to
/// the lowest index.
pub fn assign_to_nearest(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Result<Vec<usize>> {
    if centroids.is_empty() {
        return Err(Error::InvalidInput("no centroids".into()));
    }
    let d = centroids[0].len();
    if centroids.iter().chain(points).any(|v| v.len() != d) {
        return Err(Error::InvalidInput("dimension mismatch between points and centroids".into()));
    }
    Ok(points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = squared_distance(p, &centroids[0]);
            for (j, c) in centroids.iter().enumerate().skip(1) {
                let dj = squared_distance(p, c);
                if dj < best_d {
                    best = j;
                    best_d = dj;
                }
            }
            best
        })
        .collect())
}

/// Seeds, assigns once, repairs empty clusters and aggregates each cluster's
/// centroid under Paillier encryption.
///
/// An empty cluster receives the peer farthest from its assigned seed among
/// clusters that would stay non-empty; this repeats until no cluster is empty.
pub fn one_shot_cluster<R: RngCore + CryptoRng>(
    distributions: &BTreeMap<PeerId, LabelDistribution>,
    k: usize,
    rng: &mut R,
    keys: &PaillierKeyPair,
    scale: u64,
    noise: Option<AssignmentNoise>,
) -> Result<ClusterAssignment> {
    if distributions.len() < k {
        return Err(Error::InvalidConfig(format!(
            "{} peers cannot fill {k} clusters",
            distributions.len()
        )));
    }
    let peers: Vec<PeerId> = distributions.keys().copied().collect();
    let mut points: Vec<Vec<f64>> = distributions.values().map(|d| d.probs().to_vec()).collect();
    if let Some(n) = noise {
        for p in &mut points {
            *p = dp::clip_and_noise(p, n.clip, n.sigma, rng)?;
        }
    }

    let seeds = kmeanspp_seed(&points, k, rng)?;
    let mut labels = assign_to_nearest(&points, &seeds)?;
    let assignment_passes = 1;

    loop {
        let mut sizes = vec![0usize; k];
        labels.iter().for_each(|&c| sizes[c] += 1);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { break };
        let mover = (0..points.len())
            .filter(|&i| sizes[labels[i]] > 1)
            .max_by(|&a, &b| {
                let da = squared_distance(&points[a], &seeds[labels[a]]);
                let db = squared_distance(&points[b], &seeds[labels[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("k <= peers leaves a cluster with two members");
        labels[mover] = empty;
    }

    let pk = keys.public();
    let encrypted: Vec<Vec<paillier::Ciphertext>> = distributions
        .values()
        .map(|d| paillier::encrypt_vector(d.probs(), pk, scale, rng))
        .collect::<Result<_>>()?;
    let centroids = (0..k)
        .map(|c| {
            let members: Vec<Vec<paillier::Ciphertext>> = labels
                .iter()
                .zip(&encrypted)
                .filter(|(&l, _)| l == c)
                .map(|(_, e)| e.clone())
                .collect();
            paillier::secure_mean(&members, keys, scale)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ClusterAssignment {
        assignments: peers.into_iter().zip(labels).collect(),
        centroids,
        assignment_passes,
    })
}
