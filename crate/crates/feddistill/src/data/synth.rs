//! Synthetic Gaussian-blob classification data. Class centers are drawn once
//! from a scaled normal, then train and test samples add unit noise around
//! them, so both splits share the same class geometry.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub feature_dim: usize,
    /// Scale of the class-center distribution; larger separates classes more.
    pub separation: Scalar,
    pub seed: u64,
}

/// (train, test) datasets with samples grouped by class in order.
pub fn synthetic_pair(spec: &SyntheticSpec) -> (Dataset, Dataset) {
    assert!(spec.n_classes > 0 && spec.feature_dim > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut centers = vec![0.0 as Scalar; spec.n_classes * spec.feature_dim];
    for v in centers.iter_mut() {
        *v = spec.separation * normal.sample(&mut rng) as Scalar;
    }
    let mut draw = |per_class: usize| {
        let mut data = Vec::with_capacity(spec.n_classes * per_class * spec.feature_dim);
        let mut labels = Vec::with_capacity(spec.n_classes * per_class);
        for class in 0..spec.n_classes {
            let center = &centers[class * spec.feature_dim..(class + 1) * spec.feature_dim];
            for _ in 0..per_class {
                for &c in center {
                    data.push(c + normal.sample(&mut rng) as Scalar);
                }
                labels.push(class);
            }
        }
        Dataset::new(data, spec.feature_dim, None, labels, spec.n_classes)
            .expect("generator is internally consistent")
    };
    let train = draw(spec.train_per_class);
    let test = draw(spec.test_per_class);
    (train, test)
}
