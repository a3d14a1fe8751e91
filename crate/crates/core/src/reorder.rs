//! Neuron reordering and codebook initialization.
//!
//! Rows of a weight matrix are clustered and permuted so that each cluster is
//! contiguous. Contiguous row groups then get their own codebook (or their own
//! scale over a shared codebook), initialized by clustering scalar weights.

use half::f16;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{derive_seed, ClusteringMethod, Samples};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::planner::{CompressionPlan, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReorderResult {
    /// `sigma[old_row] = new_row`.
    pub sigma: Vec<usize>,
    /// Cluster block of each row, in the new order; non-decreasing.
    pub group_of_row: Vec<usize>,
}

/// Cluster the rows of `w` into `k` groups and order them so that each group is
/// contiguous. Blocks are sorted by the mean of their centroid, then by their
/// lowest original row.
pub fn reorder(w: &Matrix, k: usize, method: ClusteringMethod, seed: u64) -> Result<ReorderResult> {
    let n_o = w.rows();
    let data = w.to_f64();
    let clusters = method.cluster(Samples::new(&data, w.cols())?, k, seed)?;

    let mut first_row = vec![usize::MAX; k];
    for (row, &l) in clusters.labels.iter().enumerate() {
        first_row[l] = first_row[l].min(row);
    }
    let centroid_mean: Vec<f64> = clusters
        .centroids
        .iter()
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let mut blocks: Vec<usize> = (0..k).collect();
    blocks.sort_by(|&a, &b| {
        centroid_mean[a]
            .total_cmp(&centroid_mean[b])
            .then(first_row[a].cmp(&first_row[b]))
    });
    let mut rank = vec![0; k];
    for (r, &b) in blocks.iter().enumerate() {
        rank[b] = r;
    }

    let mut order: Vec<usize> = (0..n_o).collect();
    order.sort_by_key(|&row| (rank[clusters.labels[row]], row));
    let mut sigma = vec![0; n_o];
    let mut group_of_row = vec![0; n_o];
    for (new, &old) in order.iter().enumerate() {
        sigma[old] = new;
        group_of_row[new] = rank[clusters.labels[old]];
    }
    Ok(ReorderResult { sigma, group_of_row })
}

/// How multi-scale mode estimates each group's scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleEstimator {
    #[default]
    StdDev,
    MaxAbs,
}

/// Codebooks owning contiguous row groups, plus optional per-group scales.
///
/// In multi-codebook mode there is one codebook per group and no scales. In
/// multi-scale mode there is a single codebook and one scale per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookSet {
    pub codebooks: Vec<Vec<f64>>,
    pub scales: Option<Vec<f64>>,
    pub row_group_boundaries: Vec<usize>,
}

impl CodebookSet {
    pub fn mode(&self) -> Mode {
        if self.scales.is_some() {
            Mode::MultiScale
        } else {
            Mode::MultiCodebook
        }
    }

    pub fn n_o(&self) -> usize {
        *self.row_group_boundaries.last().unwrap_or(&0)
    }

    pub fn num_groups(&self) -> usize {
        self.row_group_boundaries.len().saturating_sub(1)
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks.first().map_or(0, Vec::len)
    }

    pub fn group_of_row(&self, row: usize) -> usize {
        self.row_group_boundaries.partition_point(|&b| b <= row) - 1
    }

    /// Codebook index used by each row.
    pub fn row_codebooks(&self) -> Vec<usize> {
        (0..self.n_o())
            .map(|r| if self.scales.is_some() { 0 } else { self.group_of_row(r) })
            .collect()
    }

    /// Scale applied to each row (1 in multi-codebook mode).
    pub fn row_scales(&self) -> Vec<f64> {
        (0..self.n_o())
            .map(|r| self.scales.as_ref().map_or(1.0, |s| s[self.group_of_row(r)]))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.row_group_boundaries;
        if b.len() < 2 || b[0] != 0 || b.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!("bad row group boundaries {b:?}")));
        }
        let expected = match &self.scales {
            Some(s) => {
                if s.len() != self.num_groups() || s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidArgument("scales must be positive, one per group".into()));
                }
                1
            }
            None => self.num_groups(),
        };
        if self.codebooks.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "{} codebooks for {} groups",
                self.codebooks.len(),
                self.num_groups()
            )));
        }
        let size = self.codebook_size();
        if size == 0 || self.codebooks.iter().any(|c| c.len() != size || c.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("codebooks must be non-empty, finite and equally sized".into()));
        }
        Ok(())
    }
}

/// Hard assignment of every weight to a codeword of its row's codebook.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardMapping {
    pub n_o: usize,
    pub n_i: usize,
    pub indices: Vec<u32>,
}

/// Group boundaries `floor(g * n_o / k)` for `g = 0..=k`.
pub fn group_boundaries(n_o: usize, k: usize) -> Vec<usize> {
    (0..=k).map(|g| g * n_o / k).collect()
}

/// Index of the nearest codeword in an ascending codebook; ties go to the lower index.
pub fn nearest_codeword(v: f64, sorted: &[f64]) -> u32 {
    let p = sorted.partition_point(|&c| c < v);
    if p == 0 {
        return 0;
    }
    if p == sorted.len() {
        return (p - 1) as u32;
    }
    if v - sorted[p - 1] <= sorted[p] - v {
        (p - 1) as u32
    } else {
        p as u32
    }
}

/// Cluster scalar values into at most `size` codewords. The codebook is sorted,
/// free of duplicates, and padded above its maximum when there are fewer
/// distinct values than `size`. Returns the codebook and the nearest-codeword
/// index of every value.
pub fn init_codebook(values: &[f64], size: usize, method: ClusteringMethod, seed: u64) -> Result<(Vec<f64>, Vec<u32>)> {
    let mut distinct = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let k = size.min(distinct.len());
    let clusters = method.cluster(Samples::scalars(values)?, k, seed)?;
    let mut codebook: Vec<f64> = clusters.centroids.iter().map(|c| c[0]).collect();
    codebook.sort_by(f64::total_cmp);
    codebook.dedup();
    pad_codebook(&mut codebook, size);
    let indices = values.iter().map(|&v| nearest_codeword(v, &codebook)).collect();
    Ok((codebook, indices))
}

/// Append distinct filler codewords above the current maximum. No weight maps
/// to them at initialization; learning may still use them.
fn pad_codebook(codebook: &mut Vec<f64>, size: usize) {
    let missing = size - codebook.len();
    if missing == 0 {
        return;
    }
    let (lo, hi) = (codebook[0], *codebook.last().unwrap());
    let span = if hi > lo { hi - lo } else { hi.abs().max(1.0) };
    let step = span / size as f64;
    codebook.extend((1..=missing).map(|t| hi + step * t as f64));
}

pub fn init_multi_codebook(w: &Matrix, plan: &CompressionPlan, method: ClusteringMethod, seed: u64) -> Result<(CodebookSet, HardMapping)> {
    if plan.mode != Mode::MultiCodebook {
        return Err(Error::InvalidArgument("plan is not multi-codebook".into()));
    }
    let (n_o, n_i) = (w.rows(), w.cols());
    let boundaries = group_boundaries(n_o, plan.num_codebooks);
    let groups: Vec<(Vec<f64>, Vec<u32>)> = (0..plan.num_codebooks)
        .into_par_iter()
        .map(|g| {
            let values: Vec<f64> = w.as_slice()[boundaries[g] * n_i..boundaries[g + 1] * n_i]
                .iter()
                .map(|&v| v as f64)
                .collect();
            init_codebook(&values, plan.codebook_size, method, derive_seed(seed, g as u64))
        })
        .collect::<Result<_>>()?;
    let mut codebooks = Vec::with_capacity(groups.len());
    let mut indices = Vec::with_capacity(n_o * n_i);
    for (codebook, idx) in groups {
        codebooks.push(codebook);
        indices.extend(idx);
    }
    Ok((
        CodebookSet {
            codebooks,
            scales: None,
            row_group_boundaries: boundaries,
        },
        HardMapping { n_o, n_i, indices },
    ))
}

/// Round a scale to a positive finite half-precision value.
fn storable_scale(v: f64) -> Option<f64> {
    let h = f16::from_f64(v.min(f16::MAX.to_f64()));
    let h = h.to_f64();
    (h > 0.0 && h.is_finite()).then_some(h)
}

/// Scale of one group of weights, already rounded to half precision so that the
/// stored value is the one used everywhere. Degenerate groups fall back to the
/// root mean square, then to the smallest positive half value.
pub fn estimate_scale(values: &[f32], estimator: ScaleEstimator) -> f64 {
    let n = values.len() as f64;
    let primary = match estimator {
        ScaleEstimator::StdDev => {
            let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
            (values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
        }
        ScaleEstimator::MaxAbs => values.iter().map(|&v| (v as f64).abs()).fold(0.0, f64::max),
    };
    let rms = || (values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n).sqrt();
    storable_scale(primary)
        .or_else(|| storable_scale(rms()))
        .unwrap_or(f16::from_bits(1).to_f64())
}

pub fn init_multi_scale(
    w: &Matrix,
    plan: &CompressionPlan,
    method: ClusteringMethod,
    seed: u64,
    estimator: ScaleEstimator,
) -> Result<(CodebookSet, HardMapping)> {
    if plan.mode != Mode::MultiScale {
        return Err(Error::InvalidArgument("plan is not multi-scale".into()));
    }
    let (n_o, n_i) = (w.rows(), w.cols());
    let boundaries = group_boundaries(n_o, plan.num_scales);
    let scales: Vec<f64> = (0..plan.num_scales)
        .map(|g| estimate_scale(&w.as_slice()[boundaries[g] * n_i..boundaries[g + 1] * n_i], estimator))
        .collect();
    let mut normalized = Vec::with_capacity(n_o * n_i);
    for g in 0..plan.num_scales {
        for &v in &w.as_slice()[boundaries[g] * n_i..boundaries[g + 1] * n_i] {
            normalized.push(v as f64 / scales[g]);
        }
    }
    let (codebook, indices) = init_codebook(&normalized, plan.codebook_size, method, seed)?;
    Ok((
        CodebookSet {
            codebooks: vec![codebook],
            scales: Some(scales),
            row_group_boundaries: boundaries,
        },
        HardMapping { n_o, n_i, indices },
    ))
}

pub fn init_layer(
    w: &Matrix,
    plan: &CompressionPlan,
    method: ClusteringMethod,
    seed: u64,
    estimator: ScaleEstimator,
) -> Result<(CodebookSet, HardMapping)> {
    match plan.mode {
        Mode::MultiCodebook => init_multi_codebook(w, plan, method, seed),
        Mode::MultiScale => init_multi_scale(w, plan, method, seed, estimator),
    }
}

/// `W[i, j] = s(i) * C(i)[I[i, j]]`, evaluated in f64 and rounded once to f32.
pub fn reconstruct(cbs: &CodebookSet, map: &HardMapping) -> Result<Matrix> {
    cbs.validate()?;
    if cbs.n_o() != map.n_o || map.indices.len() != map.n_o * map.n_i {
        return Err(Error::DimensionMismatch(format!(
            "mapping is {}x{} with {} indices, codebooks cover {} rows",
            map.n_o,
            map.n_i,
            map.indices.len(),
            cbs.n_o()
        )));
    }
    let size = cbs.codebook_size();
    let (row_cb, row_scale) = (cbs.row_codebooks(), cbs.row_scales());
    let mut data = Vec::with_capacity(map.indices.len());
    for r in 0..map.n_o {
        let codebook = &cbs.codebooks[row_cb[r]];
        for &idx in &map.indices[r * map.n_i..(r + 1) * map.n_i] {
            if idx as usize >= size {
                return Err(Error::InvalidArgument(format!("index {idx} exceeds codebook size {size}")));
            }
            data.push((row_scale[r] * codebook[idx as usize]) as f32);
        }
    }
    Matrix::from_vec(map.n_o, map.n_i, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(mode: Mode, size: usize, groups: usize) -> CompressionPlan {
        CompressionPlan {
            alpha: 4.0,
            mode,
            codebook_size: size,
            num_codebooks: if mode == Mode::MultiCodebook { groups } else { 1 },
            num_scales: if mode == Mode::MultiScale { groups } else { 0 },
            bits_per_index: size.trailing_zeros(),
        }
    }

    #[test]
    fn codebook_lookup_example() {
        let cbs = CodebookSet {
            codebooks: vec![vec![-2.0, 0.0, 0.15, 1.3]],
            scales: None,
            row_group_boundaries: vec![0, 1],
        };
        let map = HardMapping {
            n_o: 1,
            n_i: 1,
            indices: vec![2],
        };
        assert_eq!(reconstruct(&cbs, &map).unwrap().get(0, 0), 0.15);
    }

    #[test]
    fn reorder_groups_similar_rows() {
        let w = Matrix::from_fn(4, 6, |i, j| {
            let jitter = ((i * 7 + j * 3) % 5) as f32 * 0.1;
            if i % 2 == 0 {
                jitter
            } else {
                100.0 + jitter
            }
        });
        let r = reorder(&w, 2, ClusteringMethod::KMeans, 0).unwrap();
        assert_eq!(r.sigma[0].abs_diff(r.sigma[2]), 1);
        assert_eq!(r.sigma[1].abs_diff(r.sigma[3]), 1);
        assert_eq!(r.group_of_row, vec![0, 0, 1, 1]);
        // Lower-mean block first.
        assert!(r.sigma[0] < r.sigma[1]);
    }

    #[test]
    fn reorder_trivial_k() {
        let w = Matrix::from_fn(5, 3, |i, j| (i * 3 + j) as f32);
        let one = reorder(&w, 1, ClusteringMethod::Hierarchical, 0).unwrap();
        assert_eq!(one.sigma, vec![0, 1, 2, 3, 4]);
        assert_eq!(one.group_of_row, vec![0; 5]);
        let all = reorder(&w, 5, ClusteringMethod::Hierarchical, 0).unwrap();
        assert_eq!(all.group_of_row, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn constant_group_has_one_effective_codeword() {
        let w = Matrix::from_fn(2, 4, |_, _| 0.75);
        let (cbs, map) = init_multi_codebook(&w, &plan(Mode::MultiCodebook, 4, 1), ClusteringMethod::KMeans, 0).unwrap();
        assert_eq!(cbs.codebooks[0][0], 0.75);
        assert!(cbs.codebooks[0].windows(2).all(|p| p[0] < p[1]));
        assert!(map.indices.iter().all(|&i| i == 0));
        assert_eq!(reconstruct(&cbs, &map).unwrap(), w);
    }

    #[test]
    fn zero_matrix_multi_scale() {
        let w = Matrix::zeros(4, 3);
        let (cbs, map) = init_multi_scale(&w, &plan(Mode::MultiScale, 4, 2), ClusteringMethod::KMeans, 0, ScaleEstimator::StdDev).unwrap();
        let scales = cbs.scales.as_ref().unwrap();
        assert!(scales.iter().all(|&s| s == f16::from_bits(1).to_f64()));
        assert_eq!(reconstruct(&cbs, &map).unwrap(), w);
    }

    #[test]
    fn init_error_equals_kmeans_inertia() {
        let w = Matrix::from_fn(6, 10, |i, j| (((i * 31 + j * 17) % 23) as f32 - 11.0) * 0.07 + i as f32 * 0.3);
        let p = plan(Mode::MultiCodebook, 4, 3);
        let (cbs, map) = init_multi_codebook(&w, &p, ClusteringMethod::KMeans, 9).unwrap();
        let rec = reconstruct(&cbs, &map).unwrap();
        let sse: f64 = w.to_f64().iter().zip(rec.to_f64()).map(|(a, b)| (a - b).powi(2)).sum();
        let b = group_boundaries(6, 3);
        let inertia: f64 = (0..3)
            .map(|g| {
                let vals: Vec<f64> = w.to_f64()[b[g] * 10..b[g + 1] * 10].to_vec();
                ClusteringMethod::KMeans
                    .cluster(Samples::scalars(&vals).unwrap(), 4, derive_seed(9, g as u64))
                    .unwrap()
                    .inertia
            })
            .sum();
        // Reconstruction is rounded to f32, so compare with a float tolerance.
        assert!((sse - inertia).abs() <= 1e-6 * inertia, "{sse} vs {inertia}");
    }

    #[test]
    fn scale_estimators() {
        let v = [-2.0f32, -0.5, -0.5, -0.5, -0.5, 0.5, 0.5, 0.5, 0.5, 2.0];
        assert_eq!(estimate_scale(&v, ScaleEstimator::StdDev), 1.0);
        assert_eq!(estimate_scale(&v, ScaleEstimator::MaxAbs), 2.0);
        assert_eq!(estimate_scale(&[3.0; 4], ScaleEstimator::StdDev), 3.0);
    }

    #[test]
    fn nearest_codeword_ties_go_low() {
        let c = [-1.0, 0.0, 1.0];
        assert_eq!(nearest_codeword(0.5, &c), 1);
        assert_eq!(nearest_codeword(-0.5, &c), 0);
        assert_eq!(nearest_codeword(-7.0, &c), 0);
        assert_eq!(nearest_codeword(7.0, &c), 2);
    }
}
