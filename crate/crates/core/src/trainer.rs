//! One-hidden-layer ReLU classifier with softmax cross-entropy.
//!
//! Layout: `lower_layers = [W1 (hidden × input), b1 (hidden)]`, last layer
//! `W2 (classes × hidden)` and `b2 (classes)`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelDelta, ModelParams, Tensor};
use crate::partition::{LabeledDataset, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            learning_rate: 0.1,
            batch_size: 32,
            local_steps: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.batch_size == 0 || self.local_steps == 0 {
            return Err(Error::InvalidConfig("hidden_dim, batch_size and local_steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// He-initialised hidden layer, scaled Gaussian last layer, zero biases.
pub fn init_params<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, classes: usize, rng: &mut R) -> Result<ModelParams> {
    if input_dim == 0 || hidden_dim == 0 || classes == 0 {
        return Err(Error::InvalidConfig("layer sizes must be positive".into()));
    }
    let he = Normal::new(0.0, (2.0 / input_dim as f64).sqrt()).expect("positive std");
    let glorot = Normal::new(0.0, (1.0 / hidden_dim as f64).sqrt()).expect("positive std");
    let w1 = (0..hidden_dim * input_dim).map(|_| he.sample(rng)).collect();
    let w2 = (0..classes * hidden_dim).map(|_| glorot.sample(rng)).collect();
    ModelParams::new(
        vec![
            Tensor::from_vec(&[hidden_dim, input_dim], w1)?,
            Tensor::zeros(&[hidden_dim]),
        ],
        Tensor::from_vec(&[classes, hidden_dim], w2)?,
        Tensor::zeros(&[classes]),
    )
}

struct Layers<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
    input: usize,
    hidden: usize,
    classes: usize,
}

fn layers(params: &ModelParams) -> Result<Layers<'_>> {
    let lower = params.lower_layers();
    if lower.len() != 2 || lower[0].shape().len() != 2 || lower[1].shape().len() != 1 {
        return Err(Error::InvalidInput("expected [W1, b1] lower layers".into()));
    }
    let hidden = lower[0].shape()[0];
    if lower[1].shape()[0] != hidden || params.hidden_dim() != hidden {
        return Err(Error::InvalidInput("hidden sizes disagree".into()));
    }
    Ok(Layers {
        w1: lower[0].data(),
        b1: lower[1].data(),
        w2: params.last_weights().data(),
        b2: params.last_bias().data(),
        input: lower[0].shape()[1],
        hidden,
        classes: params.num_output_units(),
    })
}

fn check_sample(l: &Layers<'_>, s: &Sample) -> Result<()> {
    if s.features.len() != l.input {
        return Err(Error::InvalidInput(format!(
            "sample has {} features, model expects {}",
            s.features.len(),
            l.input
        )));
    }
    if s.label >= l.classes {
        return Err(Error::InvalidInput(format!("label {} out of {} classes", s.label, l.classes)));
    }
    Ok(())
}

/// Pre-activation hidden values and logits for one sample.
fn forward_one(l: &Layers<'_>, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let pre: Vec<f64> = (0..l.hidden)
        .map(|j| l.b1[j] + l.w1[j * l.input..(j + 1) * l.input].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect();
    let logits = (0..l.classes)
        .map(|k| {
            l.b2[k]
                + l.w2[k * l.hidden..(k + 1) * l.hidden]
                    .iter()
                    .zip(&pre)
                    .map(|(w, z)| w * z.max(0.0))
                    .sum::<f64>()
        })
        .collect();
    (pre, logits)
}

/// Softmax probabilities and `−log p[label]`, via log-sum-exp.
fn softmax_xent(logits: &[f64], label: usize) -> (Vec<f64>, f64) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    let probs = logits.iter().map(|z| (z - lse).exp()).collect();
    (probs, lse - logits[label])
}

/// Mean cross-entropy over the batch, and the logits per sample.
pub fn forward_loss(params: &ModelParams, batch: &[&Sample]) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let l = layers(params)?;
    let mut total = 0.0;
    let mut all = Vec::with_capacity(batch.len());
    for s in batch {
        check_sample(&l, s)?;
        let (_, logits) = forward_one(&l, &s.features);
        total += softmax_xent(&logits, s.label).1;
        all.push(logits);
    }
    Ok((total / batch.len() as f64, all))
}

/// Exact gradient of [`forward_loss`] by backpropagation. At a ReLU kink the
/// subgradient 0 is used.
pub fn gradient(params: &ModelParams, batch: &[&Sample]) -> Result<ModelDelta> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let l = layers(params)?;
    let mut gw1 = vec![0.0; l.w1.len()];
    let mut gb1 = vec![0.0; l.b1.len()];
    let mut gw2 = vec![0.0; l.w2.len()];
    let mut gb2 = vec![0.0; l.b2.len()];
    let inv = 1.0 / batch.len() as f64;
    for s in batch {
        check_sample(&l, s)?;
        let (pre, logits) = forward_one(&l, &s.features);
        let (mut dz, _) = softmax_xent(&logits, s.label);
        dz[s.label] -= 1.0;
        let mut dh = vec![0.0; l.hidden];
        for k in 0..l.classes {
            let d = dz[k] * inv;
            gb2[k] += d;
            let row = k * l.hidden;
            for j in 0..l.hidden {
                gw2[row + j] += d * pre[j].max(0.0);
                dh[j] += d * l.w2[row + j];
            }
        }
        for j in 0..l.hidden {
            if pre[j] <= 0.0 {
                continue;
            }
            gb1[j] += dh[j];
            let row = j * l.input;
            for (g, x) in gw1[row..row + l.input].iter_mut().zip(&s.features) {
                *g += dh[j] * x;
            }
        }
    }
    let mut out = params.zeros_like();
    out.lower_layers_mut()[0].data_mut().copy_from_slice(&gw1);
    out.lower_layers_mut()[1].data_mut().copy_from_slice(&gb1);
    out.last_weights_mut().data_mut().copy_from_slice(&gw2);
    out.last_bias_mut().data_mut().copy_from_slice(&gb2);
    Ok(out)
}

/// `params − lr · delta`.
pub fn sgd_step(params: &ModelParams, delta: &ModelDelta, lr: f64) -> Result<ModelParams> {
    params.sub(&delta.scale(lr))
}

/// Argmax accuracy and mean loss over `data`.
pub fn evaluate(params: &ModelParams, data: &LabeledDataset) -> Result<(f64, f64)> {
    let refs: Vec<&Sample> = data.samples().iter().collect();
    let (loss, logits) = forward_loss(params, &refs)?;
    let correct = logits
        .iter()
        .zip(&refs)
        .filter(|(z, s)| argmax(z) == s.label)
        .count();
    Ok((correct as f64 / refs.len() as f64, loss))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Draws `size` samples from `shard` without replacement (all of the shard
/// if it is smaller).
pub fn sample_batch<'a, R: Rng + ?Sized>(
    data: &'a LabeledDataset,
    shard: &[usize],
    size: usize,
    rng: &mut R,
) -> Result<Vec<&'a Sample>> {
    if shard.is_empty() {
        return Err(Error::DegenerateShard);
    }
    Ok(shard
        .choose_multiple(rng, size.min(shard.len()))
        .map(|&i| &data.samples()[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{synthetic_blobs, BlobSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Vec<Sample> {
        (0..n)
            .map(|_| Sample {
                features: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                label: rng.gen_range(0..classes),
            })
            .collect()
    }

    /// Independent scalar forward pass.
    fn reference_loss(p: &ModelParams, batch: &[Sample]) -> f64 {
        let w1 = p.lower_layers()[0].data();
        let b1 = p.lower_layers()[1].data();
        let (h, d) = (p.lower_layers()[0].shape()[0], p.lower_layers()[0].shape()[1]);
        let k = p.num_output_units();
        let mut total = 0.0;
        for s in batch {
            let mut hidden = vec![0.0; h];
            for j in 0..h {
                let mut a = b1[j];
                for i in 0..d {
                    a += w1[j * d + i] * s.features[i];
                }
                hidden[j] = if a > 0.0 { a } else { 0.0 };
            }
            let mut z = vec![0.0; k];
            for c in 0..k {
                z[c] = p.last_bias().data()[c];
                for j in 0..h {
                    z[c] += p.last_row(c)[j] * hidden[j];
                }
            }
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            total += -(z[s.label].exp() / denom).ln();
        }
        total / batch.len() as f64
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = init_params(3, 4, 5, &mut rng).unwrap().zeros_like();
        let batch = random_batch(&mut rng, 6, 3, 5);
        let refs: Vec<&Sample> = batch.iter().collect();
        let (loss, _) = forward_loss(&p, &refs).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = init_params(2, 3, 3, &mut rng).unwrap().zeros_like();
        p.last_bias_mut().data_mut()[2] = 800.0;
        let s = Sample {
            features: vec![0.1, 0.2],
            label: 2,
        };
        assert!(forward_loss(&p, &[&s]).unwrap().0 < 1e-300);
    }

    #[test]
    fn matches_reference_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = init_params(4, 7, 3, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 9, 4, 3);
        let refs: Vec<&Sample> = batch.iter().collect();
        assert!((forward_loss(&p, &refs).unwrap().0 - reference_loss(&p, &batch)).abs() < 1e-10);
    }

    #[test]
    fn zero_net_bias_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = init_params(2, 3, 4, &mut rng).unwrap().zeros_like();
        let batch: Vec<Sample> = (0..8)
            .map(|i| Sample {
                features: vec![0.5, -0.5],
                label: i % 4,
            })
            .collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        let g = gradient(&p, &refs).unwrap();
        for v in g.last_bias().data() {
            assert!(v.abs() < 1e-15);
        }
        let skewed: Vec<&Sample> = batch.iter().filter(|s| s.label == 1).collect();
        let g = gradient(&p, &skewed).unwrap();
        assert!((g.last_bias().data()[1] - (0.25 - 1.0)).abs() < 1e-15);
        assert!((g.last_bias().data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn finite_differences_2_16_4() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = init_params(2, 16, 4, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 10, 2, 4);
        let refs: Vec<&Sample> = batch.iter().collect();
        let g = gradient(&p, &refs).unwrap().flatten();
        let flat = p.flatten();
        let h = 1e-4;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let lp = forward_loss(&p.unflatten_like(&plus).unwrap(), &refs).unwrap().0;
            let lm = forward_loss(&p.unflatten_like(&minus).unwrap(), &refs).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(rel < 1e-5, "coordinate {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn lr_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = init_params(3, 4, 2, &mut rng).unwrap();
        let g = p.scale(3.0);
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
    }

    #[test]
    fn perfect_classifier_accuracy() {
        // Identity features with a huge diagonal last layer.
        let samples: Vec<Sample> = (0..3)
            .map(|c| Sample {
                features: (0..3).map(|i| if i == c { 1.0 } else { 0.0 }).collect(),
                label: c,
            })
            .collect();
        let data = LabeledDataset::new(samples, 3).unwrap();
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let p = ModelParams::new(
            vec![Tensor::from_vec(&[3, 3], eye.clone()).unwrap(), Tensor::zeros(&[3])],
            Tensor::from_vec(&[3, 3], eye.iter().map(|v| v * 50.0).collect()).unwrap(),
            Tensor::zeros(&[3]),
        )
        .unwrap();
        assert_eq!(evaluate(&p, &data).unwrap().0, 1.0);
    }

    #[test]
    fn sgd_converges_on_blobs() {
        let spec = BlobSpec {
            num_classes: 3,
            feature_dim: 4,
            train_per_class: 100,
            test_per_class: 50,
            center_scale: 4.0,
            spread: 0.5,
        };
        let (train, test) = synthetic_blobs(&spec, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = init_params(4, 16, 3, &mut rng).unwrap();
        let all: Vec<usize> = (0..train.len()).collect();
        for _ in 0..200 {
            let batch = sample_batch(&train, &all, 32, &mut rng).unwrap();
            p = sgd_step(&p, &gradient(&p, &batch).unwrap(), 0.1).unwrap();
        }
        assert!(evaluate(&p, &test).unwrap().0 >= 0.95);
    }

    #[test]
    fn small_steps_decrease_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ok = 0;
        for _ in 0..100 {
            let p = init_params(3, 8, 3, &mut rng).unwrap();
            let batch = random_batch(&mut rng, 8, 3, 3);
            let refs: Vec<&Sample> = batch.iter().collect();
            let before = forward_loss(&p, &refs).unwrap().0;
            let next = sgd_step(&p, &gradient(&p, &refs).unwrap(), 1e-3).unwrap();
            if forward_loss(&next, &refs).unwrap().0 <= before {
                ok += 1;
            }
        }
        assert!(ok >= 95);
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = init_params(3, 4, 2, &mut rng).unwrap();
        let wrong_dim = Sample {
            features: vec![0.0; 5],
            label: 0,
        };
        let wrong_label = Sample {
            features: vec![0.0; 3],
            label: 2,
        };
        assert!(matches!(forward_loss(&p, &[&wrong_dim]), Err(Error::InvalidInput(_))));
        assert!(matches!(gradient(&p, &[&wrong_label]), Err(Error::InvalidInput(_))));
    }
}
