use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{centroids_of, check_k, exact_kmeans_1d, inertia_of, sq_dist, ClusterResult, Samples};
use crate::error::Result;

pub const DEFAULT_MAX_ITER: usize = 300;
/// Relative inertia improvement below which iterations stop.
pub const DEFAULT_TOL: f64 = 1e-7;
/// Scalar problems up to this size are solved exactly by dynamic programming.
pub const EXACT_1D_LIMIT: usize = 4096;

/// k-means. Scalar inputs with at most [`EXACT_1D_LIMIT`] samples are solved
/// exactly; everything else runs Lloyd iterations from k-means++ seeding.
pub fn kmeans(samples: Samples<'_>, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<ClusterResult> {
    check_k(samples.len(), k)?;
    if samples.dim() == 1 && samples.len() <= EXACT_1D_LIMIT {
        return exact_kmeans_1d(samples, k);
    }
    lloyd(samples, k, seed, max_iter, tol)
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn sorted_scalar_centroids(centroids: &[Vec<f64>]) -> Vec<(f64, usize)> {
    let mut sorted: Vec<(f64, usize)> = centroids.iter().enumerate().map(|(c, v)| (v[0], c)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    sorted
}

/// Same answer as [`nearest`] for scalars, by binary search over centroids
/// sorted by (value, index).
fn nearest_scalar(v: f64, sorted: &[(f64, usize)]) -> (usize, f64) {
    let p = sorted.partition_point(|c| c.0 < v);
    let mut best = (usize::MAX, f64::INFINITY);
    if p < sorted.len() {
        let d = (sorted[p].0 - v) * (sorted[p].0 - v);
        best = (sorted[p].1, d);
    }
    if p > 0 {
        let mut q = p - 1;
        while q > 0 && sorted[q - 1].0 == sorted[p - 1].0 {
            q -= 1;
        }
        let d = (sorted[q].0 - v) * (sorted[q].0 - v);
        if d < best.1 || (d == best.1 && sorted[q].1 < best.0) {
            best = (sorted[q].1, d);
        }
    }
    best
}

fn plus_plus_seeding(samples: Samples<'_>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = samples.len();
    let mut centroids = vec![samples.point(rng.gen_range(0..n)).to_vec()];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(samples.point(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = samples.point(pick).to_vec();
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(samples.point(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations. Empty clusters are re-seeded with the sample farthest from
/// its centroid among clusters that can spare one (lowest index on ties).
pub fn lloyd(samples: Samples<'_>, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<ClusterResult> {
    check_k(samples.len(), k)?;
    let n = samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeding(samples, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut prev_inertia = f64::INFINITY;

    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let sorted = (samples.dim() == 1).then(|| sorted_scalar_centroids(&centroids));
        for i in 0..n {
            let (c, d) = match &sorted {
                Some(sorted) => nearest_scalar(samples.point(i)[0], sorted),
                None => nearest(samples.point(i), &centroids),
            };
            changed |= labels[i] != c;
            labels[i] = c;
            dist[i] = d;
        }
        reseed_empty(&mut labels, &mut dist, k);
        centroids = centroids_of(samples, &labels, k);
        let inertia = inertia_of(samples, &labels, &centroids);
        debug_assert!(
            inertia <= prev_inertia * (1.0 + 1e-12) + 1e-300,
            "k-means inertia increased: {prev_inertia} -> {inertia}"
        );
        let converged = !changed || prev_inertia - inertia <= tol * prev_inertia;
        prev_inertia = inertia;
        if converged {
            break;
        }
    }
    Ok(ClusterResult::from_labels(samples, labels, k))
}

fn reseed_empty(labels: &mut [usize], dist: &mut [f64], k: usize) {
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for i in 0..labels.len() {
            if sizes[labels[i]] > 1 && far.is_none_or(|f| dist[i] > dist[f]) {
                far = Some(i);
            }
        }
        if let Some(i) = far {
            sizes[labels[i]] -= 1;
            labels[i] = c;
            sizes[c] = 1;
            dist[i] = 0.0;
        }
    }
}
