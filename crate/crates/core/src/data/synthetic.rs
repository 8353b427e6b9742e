//! Gaussian-blob classification data.
//!
//! Class means depend only on `(classes, features)`, so train and test sets
//! drawn with different seeds share them. Samples are
//! `clamp(0.5 + 0.5·μ_c + spread·ε, 0, 1)` with `μ_c` on the unit sphere and
//! labels assigned round-robin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MEANS_SEED: u64 = 0x5eed_b10b;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub classes: usize,
    pub features: usize,
    pub spread: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            samples: 512,
            classes: 4,
            features: 16,
            spread: 0.05,
        }
    }
}

fn class_means(classes: usize, features: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(MEANS_SEED ^ ((classes as u64) << 32) ^ features as u64);
    (0..classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..features).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

pub fn synthetic_dataset(seed: u64, spec: SyntheticSpec, split: Split) -> Result<Dataset> {
    let SyntheticSpec {
        samples,
        classes,
        features,
        spread,
    } = spec;
    if samples == 0 || classes == 0 || features == 0 {
        return Err(Error::domain("synthetic dataset needs samples, classes, features >= 1"));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::domain(format!("spread must be >= 0, got {spread}")));
    }
    let means = class_means(classes, features);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(samples * features);
    let labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    for &c in &labels {
        for &m in &means[c] {
            let e: f64 = rng.sample(StandardNormal);
            data.push((0.5 + 0.5 * m + spread * e).clamp(0.0, 1.0));
        }
    }
    Dataset::new(Tensor::new(vec![samples, features], data)?, labels, classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::default();
        let a = synthetic_dataset(7, spec, Split::Train).unwrap();
        let b = synthetic_dataset(7, spec, Split::Train).unwrap();
        let c = synthetic_dataset(8, spec, Split::Train).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.inputs(), c.inputs());
    }

    #[test]
    fn balanced_round_robin() {
        let spec = SyntheticSpec {
            samples: 10,
            classes: 2,
            ..Default::default()
        };
        let d = synthetic_dataset(1, spec, Split::Train).unwrap();
        assert_eq!(d.labels().iter().filter(|&&l| l == 0).count(), 5);
        assert!(d.inputs().data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn zero_spread_is_nearest_mean_separable() {
        let spec = SyntheticSpec {
            spread: 0.0,
            ..Default::default()
        };
        let d = synthetic_dataset(3, spec, Split::Train).unwrap();
        let f = d.features();
        let x = d.inputs().data();
        // every sample equals its class prototype exactly
        for i in 0..d.len() {
            let proto = &x[(d.labels()[i]) * f..(d.labels()[i] + 1) * f];
            assert_eq!(&x[i * f..(i + 1) * f], proto);
        }
        assert!(synthetic_dataset(3, SyntheticSpec { classes: 0, ..spec }, Split::Train).is_err());
    }
}
