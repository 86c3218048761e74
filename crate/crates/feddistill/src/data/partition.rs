//! Dirichlet label-skew partitioning. For every class, a Dirichlet(alpha)
//! weight vector over clients decides how that class's samples are split;
//! small alpha concentrates each class on few clients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::{ClientDataset, DataError, Dataset};
use crate::scalar::Scalar;
use crate::seeding::derive_seed;

const MAX_ATTEMPTS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionConfig {
    pub alpha: Scalar,
    pub n_clients: usize,
    /// A draw is redrawn (up to 50 times) until every client has at least
    /// this many samples.
    pub min_samples_per_client: usize,
    pub seed: u64,
}

/// Splits `dataset` into disjoint client index sets covering every sample.
pub fn dirichlet_partition(
    dataset: &Dataset,
    cfg: &PartitionConfig,
) -> Result<Vec<ClientDataset>, DataError> {
    if cfg.n_clients == 0 {
        return Err(DataError::Invalid("n_clients must be positive".into()));
    }
    if !(cfg.alpha > 0.0) {
        return Err(DataError::Invalid(format!(
            "dirichlet alpha must be positive, got {}",
            cfg.alpha
        )));
    }
    // Per-class index pools, in dataset order.
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &label) in dataset.labels().iter().enumerate() {
        pools[label].push(i);
    }

    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[attempt as u64]));
        let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_clients];
        for pool in &pools {
            if pool.is_empty() {
                continue;
            }
            let mut pool = pool.clone();
            pool.shuffle(&mut rng);
            let weights = dirichlet_weights(cfg.alpha, cfg.n_clients, &mut rng);
            let counts = largest_remainder_counts(&weights, pool.len());
            let mut offset = 0;
            for (client, &count) in counts.iter().enumerate() {
                assignments[client].extend_from_slice(&pool[offset..offset + count]);
                offset += count;
            }
        }
        if assignments.iter().all(|a| a.len() >= cfg.min_samples_per_client) {
            return Ok(assignments
                .into_iter()
                .enumerate()
                .map(|(client_id, mut indices)| {
                    indices.sort_unstable();
                    let class_histogram = dataset.histogram_of(&indices);
                    ClientDataset { client_id, indices, class_histogram }
                })
                .collect());
        }
        log::debug!(
            "partition attempt {attempt} left a client under {} samples; redrawing",
            cfg.min_samples_per_client
        );
    }
    Err(DataError::MinSamplesUnsatisfied { min: cfg.min_samples_per_client, attempts: MAX_ATTEMPTS })
}

/// Normalized Gamma(alpha, 1) draws; falls back to uniform if every draw
/// underflows to zero.
fn dirichlet_weights(alpha: Scalar, n: usize, rng: &mut ChaCha8Rng) -> Vec<Scalar> {
    // Cast is a no-op unless Scalar is the f32 feature.
    #[allow(clippy::unnecessary_cast)]
    let gamma = Gamma::new(alpha as f64, 1.0).expect("alpha checked positive");
    let draws: Vec<Scalar> = (0..n).map(|_| gamma.sample(rng) as Scalar).collect();
    let total: Scalar = draws.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / n as Scalar; n];
    }
    draws.into_iter().map(|d| d / total).collect()
}

/// Integer apportionment of `total` by `weights`: floors first, then the
/// largest fractional remainders get the leftover, ties to lower index.
fn largest_remainder_counts(weights: &[Scalar], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(weights.len());
    let mut remainders: Vec<(usize, Scalar)> = Vec::with_capacity(weights.len());
    let mut assigned = 0;
    for (i, &w) in weights.iter().enumerate() {
        let exact = w * total as Scalar;
        let floor = exact.floor() as usize;
        counts.push(floor);
        assigned += floor;
        remainders.push((i, exact - floor as Scalar));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    // Fractional parts are each below one, so the leftover is below n.
    for k in 0..total - assigned {
        counts[remainders[k % remainders.len()].0] += 1;
    }
    debug_assert_eq!(counts.iter().sum::<usize>(), total);
    counts
}
