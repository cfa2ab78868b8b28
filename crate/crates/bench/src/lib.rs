//! Seeded fixtures shared by the benchmarks.

use fedbgs_core::partition::Sample;
use fedbgs_core::trainer;
use fedbgs_core::ModelParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` update vectors of length `dim` with entries in [-1, 1).
pub fn updates(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn payload(len: usize, seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    (0..len).map(|_| r.gen()).collect()
}

/// A model of the default run shape and a random batch for it.
pub fn model_and_batch(batch: usize, seed: u64) -> (ModelParams, Vec<Sample>) {
    let (input, hidden, classes) = (16, 32, 10);
    let mut r = rng(seed);
    let params = trainer::init_params(input, hidden, classes, &mut r).expect("valid shape");
    let samples = (0..batch)
        .map(|_| Sample {
            features: (0..input).map(|_| r.gen_range(-2.0..2.0)).collect(),
            label: r.gen_range(0..classes),
        })
        .collect();
    (params, samples)
}
