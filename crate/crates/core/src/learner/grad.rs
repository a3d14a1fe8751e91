//! Loss terms and their gradients for one layer.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Activation, LinearLayer};
use crate::reorder::CodebookSet;

/// Row-wise softmax of an `n x m` logit table.
pub fn softmax_rows(logits: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks_exact(m).zip(out.chunks_exact_mut(m)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &l) in dst.iter_mut().zip(row) {
            *d = (l - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    out
}

/// Per-row codebook index and scale, precomputed for the inner loops.
#[derive(Debug, Clone)]
pub struct RowLayout {
    pub n_o: usize,
    pub n_i: usize,
    pub codebook: Vec<usize>,
    pub scale: Vec<f64>,
}

impl RowLayout {
    pub fn new(cbs: &CodebookSet, n_i: usize) -> Self {
        Self {
            n_o: cbs.n_o(),
            n_i,
            codebook: cbs.row_codebooks(),
            scale: cbs.row_scales(),
        }
    }
}

/// `W~[w] = s(w) * sum_j p[w, j] C(w)[j]`.
pub fn soft_weights(codebooks: &[Vec<f64>], probs: &[f64], layout: &RowLayout) -> Vec<f64> {
    let m = codebooks[0].len();
    let mut out = Vec::with_capacity(layout.n_o * layout.n_i);
    for r in 0..layout.n_o {
        let c = &codebooks[layout.codebook[r]];
        for w in r * layout.n_i..(r + 1) * layout.n_i {
            let p = &probs[w * m..(w + 1) * m];
            out.push(layout.scale[r] * p.iter().zip(c).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    out
}

/// Proximal update row: `sign(a - C_j) / (1 + |a - C_j|) - [j == argmax]`
/// with `a = C[argmax]` and `sign(0) = 1`, so the argmax entry is exactly 0.
pub fn proximal_row(codebook: &[f64], argmax: usize) -> Vec<f64> {
    let a = codebook[argmax];
    codebook
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let d = a - c;
            let sign = if d >= 0.0 { 1.0 } else { -1.0 };
            let kron = if j == argmax { 1.0 } else { 0.0 };
            sign / (1.0 + d.abs()) - kron
        })
        .collect()
}

/// Chain-rule factor `dW~/dI_j = p_j (C_j - sum_l p_l C_l)` of the plain softmax
/// parameterization.
pub fn standard_row(codebook: &[f64], probs: &[f64]) -> Vec<f64> {
    let mean: f64 = codebook.iter().zip(probs).map(|(c, p)| c * p).sum();
    codebook.iter().zip(probs).map(|(c, p)| p * (c - mean)).collect()
}

/// Lowest index of the largest entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Mean over all entries of `1 - |2p - 1|^beta`.
pub fn l2_penalty(probs: &[f64], beta: f64) -> f64 {
    probs.iter().map(|&p| 1.0 - (2.0 * p - 1.0).abs().powf(beta)).sum::<f64>() / probs.len() as f64
}

/// Gradient of [`l2_penalty`] with respect to the logits, through the softmax.
/// The subgradient at `p = 0.5` is taken as 0.
pub fn l2_logit_grad(probs: &[f64], m: usize, beta: f64) -> Vec<f64> {
    let norm = probs.len() as f64;
    let mut out = vec![0.0; probs.len()];
    let mut dp = vec![0.0; m];
    for (p, dst) in probs.chunks_exact(m).zip(out.chunks_exact_mut(m)) {
        for (d, &pk) in dp.iter_mut().zip(p) {
            let u = 2.0 * pk - 1.0;
            *d = if u == 0.0 {
                0.0
            } else {
                -2.0 * beta * u.abs().powf(beta - 1.0) * u.signum() / norm
            };
        }
        let inner: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
        for k in 0..m {
            dst[k] = p[k] * (dp[k] - inner);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    /// Mean squared error between compressed and reference layer outputs.
    pub recon: f64,
    /// Mean squared error between soft and original weights.
    pub l1: f64,
    /// Mean softness penalty, before weighting by lambda.
    pub l2: f64,
}

/// Data terms of one layer's objective: output reconstruction against the
/// reference `act(W X + b)` plus weight reconstruction against `W`.
#[derive(Debug, Clone)]
pub struct Objective {
    n_o: usize,
    n_i: usize,
    batch: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
    x_tilde: Vec<f64>,
    target: Vec<f64>,
}

impl Objective {
    /// `x_tilde` feeds the compressed layer, `x` feeds the reference layer.
    pub fn new(layer: &LinearLayer, x_tilde: &Matrix, x: &Matrix) -> Result<Self> {
        if x_tilde.rows() != x.rows() {
            return Err(Error::DimensionMismatch(format!(
                "compressed features have {} rows, reference features {}",
                x_tilde.rows(),
                x.rows()
            )));
        }
        if x_tilde.cols() != layer.n_i() {
            return Err(Error::DimensionMismatch(format!(
                "features have width {}, layer expects {}",
                x_tilde.cols(),
                layer.n_i()
            )));
        }
        let target = layer
            .preactivation(x)?
            .into_iter()
            .map(|z| layer.activation.apply(z))
            .collect();
        Ok(Self {
            n_o: layer.n_o(),
            n_i: layer.n_i(),
            batch: x.rows(),
            weights: layer.weights.to_f64(),
            bias: layer
                .bias
                .as_ref()
                .map_or(vec![0.0; layer.n_o()], |b| b.iter().map(|&v| v as f64).collect()),
            activation: layer.activation,
            x_tilde: x_tilde.to_f64(),
            target,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Mean of squared targets and squared weights; a scale for "negligible".
    pub fn energy(&self) -> f64 {
        let t = self.target.iter().map(|v| v * v).sum::<f64>() / self.target.len() as f64;
        let w = self.weights.iter().map(|v| v * v).sum::<f64>() / self.weights.len() as f64;
        t + w
    }

    /// Reconstruction and weight terms with the gradient `dL/dW~` of their sum,
    /// over the given calibration rows (all rows when `None`).
    pub fn data_terms(&self, w_tilde: &[f64], rows: Option<&[usize]>) -> (f64, f64, Vec<f64>) {
        let (n_o, n_i) = (self.n_o, self.n_i);
        let all: Vec<usize>;
        let rows = match rows {
            Some(r) => r,
            None => {
                all = (0..self.batch).collect();
                &all
            }
        };
        let norm = (rows.len() * n_o) as f64;
        let mut recon = 0.0;
        let mut dz = vec![0.0; rows.len() * n_o];
        for (bi, &b) in rows.iter().enumerate() {
            let x = &self.x_tilde[b * n_i..(b + 1) * n_i];
            for o in 0..n_o {
                let w = &w_tilde[o * n_i..(o + 1) * n_i];
                let z = self.bias[o] + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                let e = self.activation.apply(z) - self.target[b * n_o + o];
                recon += e * e;
                dz[bi * n_o + o] = 2.0 * e * self.activation.derivative(z) / norm;
            }
        }
        recon /= norm;

        let numel = (n_o * n_i) as f64;
        let mut l1 = 0.0;
        let mut grad = vec![0.0; n_o * n_i];
        for (w, g) in grad.iter_mut().enumerate() {
            let d = w_tilde[w] - self.weights[w];
            l1 += d * d;
            *g = 2.0 * d / numel;
        }
        l1 /= numel;
        for (bi, &b) in rows.iter().enumerate() {
            let x = &self.x_tilde[b * n_i..(b + 1) * n_i];
            for o in 0..n_o {
                let d = dz[bi * n_o + o];
                if d != 0.0 {
                    let g = &mut grad[o * n_i..(o + 1) * n_i];
                    g.iter_mut().zip(x).for_each(|(gi, xi)| *gi += d * xi);
                }
            }
        }
        (recon, l1, grad)
    }
}

/// `dL/dC(g)[j] = sum over weights w using codebook g of upstream[w] s(w) p[w, j]`.
pub fn grad_codebooks(codebooks: &[Vec<f64>], probs: &[f64], upstream: &[f64], layout: &RowLayout) -> Vec<Vec<f64>> {
    let m = codebooks[0].len();
    let mut out = vec![vec![0.0; m]; codebooks.len()];
    for r in 0..layout.n_o {
        let g = &mut out[layout.codebook[r]];
        for w in r * layout.n_i..(r + 1) * layout.n_i {
            let u = upstream[w] * layout.scale[r];
            for (gj, &p) in g.iter_mut().zip(&probs[w * m..(w + 1) * m]) {
                *gj += u * p;
            }
        }
    }
    out
}

/// Data-term logit gradient under the proximal rule: `-upstream[w] s(w) D[w, j]`.
///
/// The update row `D` points the other way from the chain-rule factor it
/// replaces (positive toward codewords below the current one), so it enters
/// with a minus sign to make the step a descent step.
pub fn grad_logits_proximal(codebooks: &[Vec<f64>], logits: &[f64], upstream: &[f64], layout: &RowLayout) -> Vec<f64> {
    let m = codebooks[0].len();
    let mut out = vec![0.0; logits.len()];
    for r in 0..layout.n_o {
        let c = &codebooks[layout.codebook[r]];
        for w in r * layout.n_i..(r + 1) * layout.n_i {
            let d = proximal_row(c, argmax(&logits[w * m..(w + 1) * m]));
            let u = upstream[w] * layout.scale[r];
            for (o, dj) in out[w * m..(w + 1) * m].iter_mut().zip(d) {
                *o = -u * dj;
            }
        }
    }
    out
}

/// Data-term logit gradient by the exact softmax chain rule.
pub fn grad_logits_naive(codebooks: &[Vec<f64>], probs: &[f64], upstream: &[f64], layout: &RowLayout) -> Vec<f64> {
    let m = codebooks[0].len();
    let mut out = vec![0.0; probs.len()];
    for r in 0..layout.n_o {
        let c = &codebooks[layout.codebook[r]];
        for w in r * layout.n_i..(r + 1) * layout.n_i {
            let f = standard_row(c, &probs[w * m..(w + 1) * m]);
            let u = upstream[w] * layout.scale[r];
            for (o, fj) in out[w * m..(w + 1) * m].iter_mut().zip(f) {
                *o = u * fj;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn motivating_example_row() {
        let d = proximal_row(&[-2.0, 0.0, 0.15, 1.3], 2);
        let expected = [1.0 / 3.15, 1.0 / 1.15, 0.0, -1.0 / 2.15];
        for (a, b) in d.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn softmax_and_soft_weights() {
        let layout = RowLayout {
            n_o: 1,
            n_i: 1,
            codebook: vec![0],
            scale: vec![1.0],
        };
        let p = softmax_rows(&[0.0, 3f64.ln()], 2);
        assert!((soft_weights(&[vec![0.0, 2.0]], &p, &layout)[0] - 1.5).abs() < 1e-12);
        let p = softmax_rows(&[0.7, 0.7], 2);
        assert_eq!(soft_weights(&[vec![-1.0, 1.0]], &p, &layout)[0], 0.0);
    }

    #[test]
    fn l2_entries() {
        assert_eq!(l2_penalty(&[0.5], 20.0), 1.0);
        assert_eq!(l2_penalty(&[1.0, 0.0], 20.0), 0.0);
        assert_eq!(l2_logit_grad(&[0.5, 0.5], 2, 20.0), vec![0.0, 0.0]);
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        let logits = [0.3, -0.2, 1.1, 0.0, 0.4, -0.9];
        let beta = 3.0;
        let grad = l2_logit_grad(&softmax_rows(&logits, 3), 3, beta);
        let h = 1e-6;
        for k in 0..logits.len() {
            let mut up = logits;
            let mut dn = logits;
            up[k] += h;
            dn[k] -= h;
            let fd = (l2_penalty(&softmax_rows(&up, 3), beta) - l2_penalty(&softmax_rows(&dn, 3), beta)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-8, "{k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn naive_rule_is_the_exact_logit_gradient() {
        let layout = RowLayout {
            n_o: 1,
            n_i: 2,
            codebook: vec![0],
            scale: vec![1.5],
        };
        let c = vec![vec![-1.0, 0.25, 2.0]];
        let logits = [0.1, 0.5, -0.3, 1.0, 0.0, 0.2];
        let target = [0.4, -0.7];
        let f = |l: &[f64]| -> f64 {
            soft_weights(&c, &softmax_rows(l, 3), &layout)
                .iter()
                .zip(target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let w = soft_weights(&c, &softmax_rows(&logits, 3), &layout);
        let upstream: Vec<f64> = w.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect();
        let grad = grad_logits_naive(&c, &softmax_rows(&logits, 3), &upstream, &layout);
        for k in 0..6 {
            let (mut up, mut dn) = (logits, logits);
            up[k] += 1e-6;
            dn[k] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!((fd - grad[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn proximal_step_moves_toward_the_needed_side() {
        // Current weight sits at 0.15 but should be lower: the nearest lower
        // codeword must gain the most logit.
        let layout = RowLayout {
            n_o: 1,
            n_i: 1,
            codebook: vec![0],
            scale: vec![1.0],
        };
        let c = vec![vec![-2.0, 0.0, 0.15, 1.3]];
        let logits = [0.0, 0.0, 5.0, 0.0];
        let g = grad_logits_proximal(&c, &logits, &[1.0], &layout);
        let steps: Vec<f64> = g.iter().map(|v| -v).collect();
        assert_eq!(argmax(&steps), 1);
        assert!(steps[3] < 0.0 && steps[2] == 0.0);
    }
}
