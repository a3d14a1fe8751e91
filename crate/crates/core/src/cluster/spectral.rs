//! Graph clustering by recursive normalized-cut bisection.
//!
//! The similarity graph joins each sample to its `min(10, n - 1)` nearest
//! neighbours (symmetrized) with Gaussian weights whose bandwidth is the median
//! pairwise distance. A cluster is split along its components when it is
//! disconnected, otherwise along the best sweep cut of its Fiedler vector,
//! obtained by power iteration on the normalized adjacency.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_k, derive_seed, sq_dist, ClusterResult, Samples};
use crate::error::Result;

const MAX_NEIGHBOURS: usize = 10;
const POWER_TOL: f64 = 1e-8;
const POWER_MAX_ITER: usize = 10_000;
/// Scalar graphs keep at most this many distinct values.
const SCALAR_GRAPH_LIMIT: usize = 4096;
const MEDIAN_PAIR_LIMIT: usize = 2048;

#[derive(Debug, Clone)]
pub struct SimilarityGraph {
    adj: Vec<Vec<(usize, f64)>>,
}

impl SimilarityGraph {
    pub fn build(samples: Samples<'_>) -> Self {
        let n = samples.len();
        if n == 1 {
            return Self { adj: vec![Vec::new()] };
        }
        let knn = MAX_NEIGHBOURS.min(n - 1);
        let neighbours: Vec<Vec<(usize, f64)>> = if samples.dim() == 1 {
            scalar_neighbours(samples.raw(), knn)
        } else {
            (0..n)
                .map(|i| {
                    let mut d: Vec<(usize, f64)> = (0..n)
                        .filter(|&j| j != i)
                        .map(|j| (j, sq_dist(samples.point(i), samples.point(j))))
                        .collect();
                    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                    d.truncate(knn);
                    d
                })
                .collect()
        };

        let mut bandwidth = median_distance(samples);
        if !(bandwidth > 0.0) {
            bandwidth = 1.0;
        }
        let denom = 2.0 * bandwidth * bandwidth;
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, list) in neighbours.iter().enumerate() {
            for &(j, d2) in list {
                let w = (-d2 / denom).exp();
                adj[i].push((j, w));
                adj[j].push((i, w));
            }
        }
        for list in &mut adj {
            list.sort_by_key(|a| a.0);
            list.dedup_by_key(|e| e.0);
            list.retain(|e| e.1 > 0.0);
        }
        Self { adj }
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adj[i]
            .binary_search_by_key(&j, |e| e.0)
            .map_or(0.0, |p| self.adj[i][p].1)
    }

    pub fn neighbours(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[i]
    }
}

fn scalar_neighbours(values: &[f64], knn: usize) -> Vec<Vec<(usize, f64)>> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = vec![Vec::new(); n];
    for (pos, &i) in order.iter().enumerate() {
        let lo = pos.saturating_sub(knn);
        let hi = (pos + knn).min(n - 1);
        let mut cand: Vec<(usize, f64)> = (lo..=hi)
            .filter(|&p| p != pos)
            .map(|p| {
                let d = values[order[p]] - values[i];
                (order[p], d * d)
            })
            .collect();
        cand.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        cand.truncate(knn);
        out[i] = cand;
    }
    out
}

fn median_distance(samples: Samples<'_>) -> f64 {
    let n = samples.len();
    let idx: Vec<usize> = if n <= MEDIAN_PAIR_LIMIT {
        (0..n).collect()
    } else {
        (0..MEDIAN_PAIR_LIMIT).map(|t| t * n / MEDIAN_PAIR_LIMIT).collect()
    };
    let mut d = Vec::with_capacity(idx.len() * (idx.len() - 1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            d.push(sq_dist(samples.point(i), samples.point(j)).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    d.select_nth_unstable_by(mid, f64::total_cmp);
    d[mid]
}

/// Normalized cut value of the bipartition `in_a` over the given nodes.
pub fn normalized_cut(graph: &SimilarityGraph, nodes: &[usize], in_a: &[bool]) -> f64 {
    let mut local = vec![usize::MAX; graph.len()];
    for (p, &v) in nodes.iter().enumerate() {
        local[v] = p;
    }
    let (mut cut, mut vol_a, mut vol_b) = (0.0, 0.0, 0.0);
    for (p, &v) in nodes.iter().enumerate() {
        for &(u, w) in graph.neighbours(v) {
            let q = local[u];
            if q == usize::MAX {
                continue;
            }
            if in_a[p] {
                vol_a += w;
            } else {
                vol_b += w;
            }
            if in_a[p] && !in_a[q] {
                cut += w;
            }
        }
    }
    if vol_a == 0.0 || vol_b == 0.0 {
        return f64::INFINITY;
    }
    cut / vol_a + cut / vol_b
}

/// Connected components of the subgraph induced by `nodes`, ordered by their
/// smallest member.
fn components(graph: &SimilarityGraph, nodes: &[usize]) -> Vec<Vec<usize>> {
    let mut local = vec![usize::MAX; graph.len()];
    for (p, &v) in nodes.iter().enumerate() {
        local[v] = p;
    }
    let mut comp = vec![usize::MAX; nodes.len()];
    let mut out = Vec::new();
    for start in 0..nodes.len() {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut stack = vec![start];
        comp[start] = id;
        let mut members = Vec::new();
        while let Some(p) = stack.pop() {
            members.push(nodes[p]);
            for &(u, _) in graph.neighbours(nodes[p]) {
                let q = local[u];
                if q != usize::MAX && comp[q] == usize::MAX {
                    comp[q] = id;
                    stack.push(q);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// Bisect a connected node set along the sweep cut of its Fiedler vector.
fn fiedler_split(graph: &SimilarityGraph, nodes: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = nodes.len();
    if n == 2 {
        return (vec![nodes[0]], vec![nodes[1]]);
    }
    let mut local = vec![usize::MAX; graph.len()];
    for (p, &v) in nodes.iter().enumerate() {
        local[v] = p;
    }
    let edges: Vec<Vec<(usize, f64)>> = nodes
        .iter()
        .map(|&v| {
            graph
                .neighbours(v)
                .iter()
                .filter(|&&(u, _)| local[u] != usize::MAX)
                .map(|&(u, w)| (local[u], w))
                .collect()
        })
        .collect();
    let degree: Vec<f64> = edges.iter().map(|e| e.iter().map(|x| x.1).sum()).collect();
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut top: Vec<f64> = degree.iter().map(|d| d.sqrt()).collect();
    normalize(&mut top);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
    deflate(&mut v, &top);
    normalize(&mut v);
    let mut next = vec![0.0; n];
    for _ in 0..POWER_MAX_ITER {
        // next = (I + D^-1/2 W D^-1/2) v
        for p in 0..n {
            let mut acc = v[p];
            for &(q, w) in &edges[p] {
                acc += inv_sqrt[p] * w * inv_sqrt[q] * v[q];
            }
            next[p] = acc;
        }
        deflate(&mut next, &top);
        normalize(&mut next);
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        std::mem::swap(&mut v, &mut next);
        if delta < POWER_TOL {
            break;
        }
    }
    let embedding: Vec<f64> = v.iter().zip(&inv_sqrt).map(|(x, s)| x * s).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| embedding[a].total_cmp(&embedding[b]).then(nodes[a].cmp(&nodes[b])));
    let total_vol: f64 = degree.iter().sum();
    let mut in_a = vec![false; n];
    let (mut cut, mut vol_a) = (0.0, 0.0);
    let mut best = (f64::INFINITY, 1);
    for (t, &p) in order.iter().enumerate().take(n - 1) {
        for &(q, w) in &edges[p] {
            if in_a[q] {
                cut -= w;
            } else {
                cut += w;
            }
        }
        in_a[p] = true;
        vol_a += degree[p];
        let vol_b = total_vol - vol_a;
        let ncut = if vol_a > 0.0 && vol_b > 0.0 {
            cut / vol_a + cut / vol_b
        } else {
            f64::INFINITY
        };
        if ncut < best.0 {
            best = (ncut, t + 1);
        }
    }
    let mut a: Vec<usize> = order[..best.1].iter().map(|&p| nodes[p]).collect();
    let mut b: Vec<usize> = order[best.1..].iter().map(|&p| nodes[p]).collect();
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

fn deflate(v: &mut [f64], unit: &[f64]) {
    let dot: f64 = v.iter().zip(unit).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(unit).for_each(|(a, b)| *a -= dot * b);
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn graph_partition(samples: Samples<'_>, k: usize, seed: u64) -> Vec<usize> {
    let graph = SimilarityGraph::build(samples);
    let mut parts: Vec<Vec<usize>> = vec![(0..samples.len()).collect()];
    let mut split = 0u64;
    while parts.len() < k {
        let disconnected = parts
            .iter()
            .enumerate()
            .filter(|(_, p)| p.len() >= 2)
            .map(|(i, p)| (i, components(&graph, p)))
            .find(|(_, c)| c.len() > 1);
        let (target, left, right) = match disconnected {
            Some((i, comps)) => {
                let mut rest: Vec<usize> = comps[1..].concat();
                rest.sort_unstable();
                (i, comps[0].clone(), rest)
            }
            None => {
                let i = parts
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.len() >= 2)
                    .fold(None::<(usize, usize)>, |acc, (i, p)| match acc {
                        Some((_, len)) if p.len() <= len => acc,
                        _ => Some((i, p.len())),
                    })
                    .map(|(i, _)| i)
                    .expect("k <= n guarantees a splittable part");
                let (a, b) = fiedler_split(&graph, &parts[i], derive_seed(seed, split));
                (i, a, b)
            }
        };
        split += 1;
        parts[target] = left;
        parts.push(right);
    }
    let mut labels = vec![0; samples.len()];
    for (c, p) in parts.iter().enumerate() {
        for &i in p {
            labels[i] = c;
        }
    }
    labels
}

pub fn graph_spectral(samples: Samples<'_>, k: usize, seed: u64) -> Result<ClusterResult> {
    let n = samples.len();
    check_k(n, k)?;
    if samples.dim() == 1 {
        // Repeated scalars would form cliques of zero-distance neighbours, so
        // the graph is built over distinct values (evenly spaced order
        // statistics of them beyond the size limit) and every sample takes
        // the label of the nearest retained value.
        let values = samples.raw();
        let mut distinct = values.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let reps: Vec<f64> = if distinct.len() > SCALAR_GRAPH_LIMIT {
            (0..SCALAR_GRAPH_LIMIT)
                .map(|t| distinct[t * (distinct.len() - 1) / (SCALAR_GRAPH_LIMIT - 1)])
                .collect()
        } else {
            distinct
        };
        if reps.len() >= k && reps.len() < n {
            let rep_labels = graph_partition(Samples::scalars(&reps)?, k, seed);
            let labels: Vec<usize> = values
                .iter()
                .map(|&v| {
                    let p = reps.partition_point(|&r| r < v);
                    let pick = if p == 0 {
                        0
                    } else if p == reps.len() || v - reps[p - 1] <= reps[p] - v {
                        p - 1
                    } else {
                        p
                    };
                    rep_labels[pick]
                })
                .collect();
            return Ok(ClusterResult::from_labels(samples, labels, k));
        }
    }
    let labels = graph_partition(samples, k, seed);
    Ok(ClusterResult::from_labels(samples, labels, k))
}
