//! Optimal k-means on the real line.
//!
//! In one dimension every optimal cluster is a contiguous run of the sorted
//! samples, so the problem reduces to choosing `k - 1` split points. The
//! dynamic program `best[m][j] = min_i best[m-1][i] + cost(i, j)` has a
//! monotone optimal split, which lets each layer be filled by divide and
//! conquer in `O(n log n)`.

use super::{check_k, ClusterResult, Samples};
use crate::error::{Error, Result};

struct PrefixCost {
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl PrefixCost {
    fn new(sorted: &[f64]) -> Self {
        let shift = sorted[sorted.len() / 2];
        let mut s1 = Vec::with_capacity(sorted.len() + 1);
        let mut s2 = Vec::with_capacity(sorted.len() + 1);
        s1.push(0.0);
        s2.push(0.0);
        for &v in sorted {
            let x = v - shift;
            s1.push(s1.last().unwrap() + x);
            s2.push(s2.last().unwrap() + x * x);
        }
        Self { s1, s2 }
    }

    /// Sum of squared deviations of sorted[i..j] from their mean.
    #[inline]
    fn cost(&self, i: usize, j: usize) -> f64 {
        let n = (j - i) as f64;
        let s = self.s1[j] - self.s1[i];
        (self.s2[j] - self.s2[i] - s * s / n).max(0.0)
    }
}

pub fn exact_kmeans_1d(samples: Samples<'_>, k: usize) -> Result<ClusterResult> {
    if samples.dim() != 1 {
        return Err(Error::InvalidArgument("exact 1-d k-means needs scalar samples".into()));
    }
    let n = samples.len();
    check_k(n, k)?;
    let values = samples.raw();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let pc = PrefixCost::new(&sorted);

    // best[j]: optimal cost of the first j samples with the current segment count.
    let mut best: Vec<f64> = (0..=n).map(|j| if j == 0 { 0.0 } else { pc.cost(0, j) }).collect();
    let mut splits: Vec<Vec<u32>> = Vec::with_capacity(k.saturating_sub(1));
    for m in 2..=k {
        let mut next = vec![f64::INFINITY; n + 1];
        let mut arg = vec![0u32; n + 1];
        fill_layer(&pc, &best, &mut next, &mut arg, m, n, m - 1, n - 1);
        best = next;
        splits.push(arg);
    }

    let mut labels_sorted = vec![0usize; n];
    let mut end = n;
    for m in (1..=k).rev() {
        let start = if m == 1 { 0 } else { splits[m - 2][end] as usize };
        for l in &mut labels_sorted[start..end] {
            *l = m - 1;
        }
        end = start;
    }
    let mut labels = vec![0usize; n];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = labels_sorted[pos];
    }
    Ok(ClusterResult::from_labels(samples, labels, k))
}

/// Fill next[j] for j in [lo, hi] given that the optimal split lies in [opt_lo, opt_hi].
#[allow(clippy::too_many_arguments)]
fn fill_layer(
    pc: &PrefixCost,
    prev: &[f64],
    next: &mut [f64],
    arg: &mut [u32],
    lo: usize,
    hi: usize,
    opt_lo: usize,
    opt_hi: usize,
) {
    if lo > hi {
        return;
    }
    let mid = (lo + hi) / 2;
    let mut best = (f64::INFINITY, opt_lo);
    for i in opt_lo..=opt_hi.min(mid - 1) {
        let v = prev[i] + pc.cost(i, mid);
        if v < best.0 {
            best = (v, i);
        }
    }
    next[mid] = best.0;
    arg[mid] = best.1 as u32;
    if mid > lo {
        fill_layer(pc, prev, next, arg, lo, mid - 1, opt_lo, best.1);
    }
    fill_layer(pc, prev, next, arg, mid + 1, hi, best.1, opt_hi);
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute force over all ways to cut the sorted sequence into k runs.
    fn best_contiguous(sorted: &[f64], k: usize) -> f64 {
        fn rec(s: &[f64], k: usize) -> f64 {
            let cost = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
            };
            if k == 1 {
                return cost(s);
            }
            (1..=s.len() - (k - 1))
                .map(|i| cost(&s[..i]) + rec(&s[i..], k - 1))
                .fold(f64::INFINITY, f64::min)
        }
        rec(sorted, k)
    }

    #[test]
    fn matches_contiguous_brute_force() {
        let mut state = 17u64;
        for n in 3..12 {
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                    (state >> 40) as f64 / 1e5
                })
                .collect();
            let mut sorted = data.clone();
            sorted.sort_by(f64::total_cmp);
            for k in 1..=n.min(5) {
                let r = exact_kmeans_1d(Samples::scalars(&data).unwrap(), k).unwrap();
                let oracle = best_contiguous(&sorted, k);
                assert!((r.inertia - oracle).abs() <= 1e-9 * oracle.max(1e-9), "n={n} k={k}");
            }
        }
    }

    #[test]
    fn constant_clusters_have_exact_centroids() {
        let data = [0.1, 0.1, 0.1, 0.7, 0.7];
        let r = exact_kmeans_1d(Samples::scalars(&data).unwrap(), 2).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut c: Vec<f64> = r.centroids.iter().map(|c| c[0]).collect();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.1, 0.7]);
    }
}
