use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_k, ClusterResult, Samples};
use crate::error::Result;

/// Random partition: labels `i mod k` shuffled uniformly, so every cluster is
/// used and sizes differ by at most one.
pub fn random_clustering(samples: Samples<'_>, k: usize, seed: u64) -> Result<ClusterResult> {
    let n = samples.len();
    check_k(n, k)?;
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(ClusterResult::from_labels(samples, labels, k))
}
