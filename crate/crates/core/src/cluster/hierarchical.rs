//! Agglomerative clustering with Ward linkage.
//!
//! Scalars take a sorted fast path: under Ward linkage the cheapest merge on
//! the real line is always between neighbouring clusters, so only adjacent
//! pairs need to be tracked. Other inputs use the nearest-neighbour chain
//! algorithm over a condensed Lance-Williams distance matrix.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use super::{check_k, sq_dist, ClusterResult, Samples};
use crate::error::Result;

/// Ward clustering into `k` clusters. Seed-free and deterministic; ties go to
/// the lowest pair index.
pub fn hierarchical(samples: Samples<'_>, k: usize) -> Result<ClusterResult> {
    check_k(samples.len(), k)?;
    if samples.dim() == 1 {
        Ok(ward_1d(samples, k))
    } else {
        ward_generic(samples, k)
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Key(f64, usize);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

fn ward_cost(n_a: f64, mean_a: f64, n_b: f64, mean_b: f64) -> f64 {
    let d = mean_a - mean_b;
    n_a * n_b / (n_a + n_b) * d * d
}

fn ward_1d(samples: Samples<'_>, k: usize) -> ClusterResult {
    let values = samples.raw();
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));

    // Clusters live at the sorted position of their leftmost member.
    let mut count = vec![1.0f64; n];
    let mut mean: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let mut next: Vec<Option<usize>> = (0..n).map(|p| (p + 1 < n).then_some(p + 1)).collect();
    let mut prev: Vec<Option<usize>> = (0..n).map(|p| p.checked_sub(1)).collect();
    let mut alive = vec![true; n];
    let mut version = vec![0u32; n];

    let mut heap = BinaryHeap::new();
    for p in 0..n.saturating_sub(1) {
        heap.push(Reverse((Key(ward_cost(1.0, mean[p], 1.0, mean[p + 1]), p), 0u32, 0u32)));
    }

    let mut clusters = n;
    while clusters > k {
        let Reverse((Key(_, left), v_left, v_right)) = heap.pop().expect("pairs remain while clusters > 1");
        let Some(right) = next[left] else { continue };
        if !alive[left] || version[left] != v_left || version[right] != v_right {
            continue;
        }
        let total = count[left] + count[right];
        mean[left] += (mean[right] - mean[left]) * count[right] / total;
        count[left] = total;
        alive[right] = false;
        next[left] = next[right];
        if let Some(r) = next[left] {
            prev[r] = Some(left);
        }
        version[left] += 1;
        clusters -= 1;

        if let Some(l) = prev[left] {
            let c = ward_cost(count[l], mean[l], count[left], mean[left]);
            heap.push(Reverse((Key(c, l), version[l], version[left])));
        }
        if let Some(r) = next[left] {
            let c = ward_cost(count[left], mean[left], count[r], mean[r]);
            heap.push(Reverse((Key(c, left), version[left], version[r])));
        }
    }

    let mut labels = vec![0usize; n];
    let mut label = 0;
    let mut pos = Some(0);
    while let Some(p) = pos {
        let end = next[p].unwrap_or(n);
        for &i in &order[p..end] {
            labels[i] = label;
        }
        label += 1;
        pos = next[p];
    }
    ClusterResult::from_labels(samples, labels, k)
}

struct Condensed {
    n: usize,
    d: Vec<f64>,
}

impl Condensed {
    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.d[self.idx(i, j)]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.d[k] = v;
    }
}

/// Ward clustering of arbitrary-dimension samples via the nearest-neighbour
/// chain. Exposed so the scalar fast path can be checked against it.
pub fn ward_generic(samples: Samples<'_>, k: usize) -> Result<ClusterResult> {
    let n = samples.len();
    check_k(n, k)?;
    if n == 1 {
        return Ok(ClusterResult::from_labels(samples, vec![0], 1));
    }
    let mut dist = Condensed {
        n,
        d: vec![0.0; n * (n - 1) / 2],
    };
    for i in 0..n {
        for j in i + 1..n {
            dist.set(i, j, sq_dist(samples.point(i), samples.point(j)));
        }
    }
    let mut size = vec![1.0f64; n];
    let mut active = vec![true; n];
    // (height, creation order, a, b) with clusters stored at slot min(a, b).
    let mut merges: Vec<(f64, usize, usize, usize)> = Vec::with_capacity(n - 1);
    let mut chain: Vec<usize> = Vec::with_capacity(n);

    while merges.len() < n - 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).unwrap());
        }
        loop {
            let a = *chain.last().unwrap();
            let prev = chain.len().checked_sub(2).map(|i| chain[i]);
            let mut best: Option<(f64, usize)> = prev.map(|p| (dist.get(a, p), p));
            for b in 0..n {
                if b == a || !active[b] {
                    continue;
                }
                let d = dist.get(a, b);
                let better = match best {
                    None => true,
                    Some((bd, bi)) => d < bd || (d == bd && Some(bi) != prev && b < bi),
                };
                if better {
                    best = Some((d, b));
                }
            }
            let (d, b) = best.unwrap();
            if Some(b) == prev {
                chain.pop();
                chain.pop();
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                merges.push((d, merges.len(), lo, hi));
                let (n_lo, n_hi) = (size[lo], size[hi]);
                for c in 0..n {
                    if c == lo || c == hi || !active[c] {
                        continue;
                    }
                    let n_c = size[c];
                    let v = ((n_lo + n_c) * dist.get(c, lo) + (n_hi + n_c) * dist.get(c, hi) - n_c * d)
                        / (n_lo + n_hi + n_c);
                    dist.set(c, lo, v);
                }
                size[lo] = n_lo + n_hi;
                active[hi] = false;
                break;
            }
            chain.push(b);
        }
    }

    merges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(_, _, a, b) in merges.iter().take(n - k) {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
    let mut label_of_root = vec![usize::MAX; n];
    let mut next_label = 0;
    let mut labels = vec![0usize; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if label_of_root[r] == usize::MAX {
            label_of_root[r] = next_label;
            next_label += 1;
        }
        labels[i] = label_of_root[r];
    }
    Ok(ClusterResult::from_labels(samples, labels, k))
}
