use super::{check_k, derive_seed, kmeans, ClusterResult, Samples, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::error::Result;

struct Part {
    members: Vec<usize>,
    inertia: f64,
}

fn part_inertia(samples: Samples<'_>, members: &[usize]) -> f64 {
    let sub: Vec<f64> = members.iter().flat_map(|&i| samples.point(i).iter().copied()).collect();
    let view = Samples::new(&sub, samples.dim()).expect("non-empty part");
    ClusterResult::from_labels(view, vec![0; members.len()], 1).inertia
}

/// Divisive k-means: split the part with the largest inertia in two until `k`
/// parts exist.
pub fn bisecting_kmeans(samples: Samples<'_>, k: usize, seed: u64) -> Result<ClusterResult> {
    let n = samples.len();
    check_k(n, k)?;
    let all: Vec<usize> = (0..n).collect();
    let mut parts = vec![Part {
        inertia: part_inertia(samples, &all),
        members: all,
    }];

    for split in 0..k - 1 {
        let target = parts
            .iter()
            .enumerate()
            .filter(|(_, p)| p.members.len() >= 2)
            .fold(None::<(usize, f64)>, |acc, (i, p)| match acc {
                Some((_, best)) if p.inertia <= best => acc,
                _ => Some((i, p.inertia)),
            })
            .map(|(i, _)| i)
            .expect("k <= n guarantees a splittable part");

        let members = std::mem::take(&mut parts[target].members);
        let sub: Vec<f64> = members.iter().flat_map(|&i| samples.point(i).iter().copied()).collect();
        let view = Samples::new(&sub, samples.dim())?;
        let halves = kmeans(view, 2, derive_seed(seed, split as u64), DEFAULT_MAX_ITER, DEFAULT_TOL)?;
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for (pos, &i) in members.iter().enumerate() {
            if halves.labels[pos] == 0 {
                left.push(i);
            } else {
                right.push(i);
            }
        }
        parts[target] = Part {
            inertia: part_inertia(samples, &left),
            members: left,
        };
        parts.push(Part {
            inertia: part_inertia(samples, &right),
            members: right,
        });
    }

    let mut labels = vec![0usize; n];
    for (c, part) in parts.iter().enumerate() {
        for &i in &part.members {
            labels[i] = c;
        }
    }
    Ok(ClusterResult::from_labels(samples, labels, k))
}
