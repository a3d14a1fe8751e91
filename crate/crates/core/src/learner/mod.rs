//! Layer-wise joint optimization of codebooks and soft mappings.

mod adam;
pub mod grad;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use half::f16;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::LinearLayer;
use crate::reorder::{CodebookSet, HardMapping};

pub use adam::{Adam, RowAdam};
pub use grad::{
    argmax, grad_codebooks, grad_logits_naive, grad_logits_proximal, l2_logit_grad, l2_penalty, proximal_row,
    soft_weights, softmax_rows, standard_row, LossParts, Objective, RowLayout,
};

/// How the mapping logits are updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingRule {
    /// Logits stay at their initial values; only codebooks learn.
    Frozen,
    /// Exact softmax chain rule.
    Naive,
    /// Inverse-distance proximal rule.
    #[default]
    Proximal,
}

impl MappingRule {
    pub fn name(self) -> &'static str {
        match self {
            MappingRule::Frozen => "frozen",
            MappingRule::Naive => "naive",
            MappingRule::Proximal => "proximal",
        }
    }
}

impl fmt::Display for MappingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MappingRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [MappingRule::Frozen, MappingRule::Naive, MappingRule::Proximal]
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mapping rule {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub beta_start: f64,
    pub beta_end: f64,
    pub warmup_fraction: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub lr_codebook: f64,
    pub lr_logits: f64,
    pub seed: u64,
    /// Initial logit of the assigned codeword; all others start at 0.
    pub logit_margin: f64,
    pub rule: MappingRule,
    /// Calibration rows per step; full batch when `None`.
    pub batch_size: Option<usize>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            beta_start: 20.0,
            beta_end: 2.0,
            warmup_fraction: 0.2,
            lambda: 0.01,
            iterations: 10_000,
            lr_codebook: 1e-4,
            lr_logits: 1e-3,
            seed: 12345,
            logit_margin: 6.0,
            rule: MappingRule::Proximal,
            batch_size: None,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0
            && self.lambda.is_finite()
            && (0.0..=1.0).contains(&self.warmup_fraction)
            && self.beta_start >= self.beta_end
            && self.beta_end > 0.0
            && self.lr_codebook >= 0.0
            && self.lr_logits >= 0.0
            && self.logit_margin.is_finite()
            && self.batch_size != Some(0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("inconsistent schedule {self:?}")))
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.iterations as f64).floor() as usize
    }

    pub fn in_warmup(&self, step: usize) -> bool {
        step < self.warmup_steps()
    }

    /// Held at `beta_start` during warmup, then linear down to `beta_end` at the last step.
    pub fn beta(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            return self.beta_start;
        }
        let span = self.iterations.saturating_sub(warm + 1).max(1) as f64;
        let t = ((step - warm) as f64 / span).min(1.0);
        self.beta_start + (self.beta_end - self.beta_start) * t
    }

    /// Weight of the softness penalty at `step`.
    pub fn lambda_at(&self, step: usize) -> f64 {
        if self.in_warmup(step) {
            0.0
        } else {
            self.lambda
        }
    }
}

/// Per-weight logits over the codewords of the weight's codebook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftMapping {
    pub n_o: usize,
    pub n_i: usize,
    pub codebook_size: usize,
    /// `(n_o * n_i) x codebook_size`, row-major.
    pub logits: Vec<f64>,
}

impl SoftMapping {
    /// Logit `margin` on the assigned codeword and 0 elsewhere.
    pub fn from_hard(map: &HardMapping, codebook_size: usize, margin: f64) -> Self {
        let mut logits = vec![0.0; map.indices.len() * codebook_size];
        for (w, &idx) in map.indices.iter().enumerate() {
            logits[w * codebook_size + idx as usize] = margin;
        }
        Self {
            n_o: map.n_o,
            n_i: map.n_i,
            codebook_size,
            logits,
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax_rows(&self.logits, self.codebook_size)
    }

    pub fn hard(&self) -> HardMapping {
        HardMapping {
            n_o: self.n_o,
            n_i: self.n_i,
            indices: self
                .logits
                .chunks_exact(self.codebook_size)
                .map(|row| argmax(row) as u32)
                .collect(),
        }
    }
}

/// Soft weights `s * C softmax(I)` as a matrix.
pub fn soft_reconstruct(cbs: &CodebookSet, soft: &SoftMapping) -> Result<Matrix> {
    check_shapes(cbs, soft)?;
    let layout = RowLayout::new(cbs, soft.n_i);
    let w = soft_weights(&cbs.codebooks, &soft.probs(), &layout);
    Matrix::from_vec(soft.n_o, soft.n_i, w.into_iter().map(|v| v as f32).collect())
}

fn check_shapes(cbs: &CodebookSet, soft: &SoftMapping) -> Result<()> {
    cbs.validate()?;
    if cbs.n_o() != soft.n_o
        || cbs.codebook_size() != soft.codebook_size
        || soft.logits.len() != soft.n_o * soft.n_i * soft.codebook_size
    {
        return Err(Error::DimensionMismatch(format!(
            "soft mapping {}x{}x{} does not fit codebooks over {} rows of size {}",
            soft.n_o,
            soft.n_i,
            soft.codebook_size,
            cbs.n_o(),
            cbs.codebook_size()
        )));
    }
    Ok(())
}

/// Total loss and its parts at `step`, evaluated on the full calibration batch.
pub fn loss_total(
    cbs: &CodebookSet,
    soft: &SoftMapping,
    x_tilde: &Matrix,
    x: &Matrix,
    layer: &LinearLayer,
    sched: &Schedule,
    step: usize,
) -> Result<LossParts> {
    check_shapes(cbs, soft)?;
    let objective = Objective::new(layer, x_tilde, x)?;
    let layout = RowLayout::new(cbs, soft.n_i);
    let probs = soft.probs();
    let w = soft_weights(&cbs.codebooks, &probs, &layout);
    let (recon, l1, _) = objective.data_terms(&w, None);
    let weight = sched.lambda_at(step) * probs.len() as f64;
    Ok(assemble(recon, l1, l2_penalty(&probs, sched.beta(step)), weight))
}

/// `l2` is the mean penalty; `weight` is lambda times the number of entries so
/// that lambda acts on the summed penalty.
fn assemble(recon: f64, l1: f64, l2: f64, weight: f64) -> LossParts {
    LossParts {
        total: recon + l1 + weight * l2,
        recon,
        l1,
        l2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub l1: f64,
    pub l2: f64,
    pub beta: f64,
}

pub fn write_trace_csv(trace: &[TraceRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,total,recon,l1,l2,beta")?;
    for r in trace {
        writeln!(out, "{},{:e},{:e},{:e},{:e},{}", r.step, r.total, r.recon, r.l1, r.l2, r.beta)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LayerOutcome {
    pub codebooks: CodebookSet,
    pub mapping: SoftMapping,
    pub trace: Vec<TraceRow>,
}

/// Adaptive-moment descent on codebooks and logits for `sched.iterations`
/// steps. Codebooks use elementwise moments. All logits of the layer share one
/// second moment, so a weight with a small upstream gradient also takes a
/// small step instead of being normalized up to the learning rate. Scales
/// stay fixed.
pub fn optimize_layer(
    layer: &LinearLayer,
    mut cbs: CodebookSet,
    mut soft: SoftMapping,
    x_tilde: &Matrix,
    x: &Matrix,
    sched: &Schedule,
) -> Result<LayerOutcome> {
    sched.validate()?;
    check_shapes(&cbs, &soft)?;
    if soft.n_i != layer.n_i() || soft.n_o != layer.n_o() {
        return Err(Error::DimensionMismatch("mapping does not match the layer".into()));
    }
    let objective = Objective::new(layer, x_tilde, x)?;
    let layout = RowLayout::new(&cbs, soft.n_i);
    let m = soft.codebook_size;
    let flat_len = cbs.codebooks.len() * m;
    let mut adam_c = Adam::new(flat_len, sched.lr_codebook);
    let mut adam_i = RowAdam::new(1, soft.logits.len(), sched.lr_logits);
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut order: Vec<usize> = (0..objective.batch()).collect();
    let mut cursor = order.len();
    let floor = 1e-12 * objective.energy();
    let mut initial_data = None;
    let mut trace = Vec::with_capacity(sched.iterations);

    for step in 0..sched.iterations {
        let rows = match sched.batch_size {
            Some(bs) if bs < order.len() => {
                if cursor + bs > order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += bs;
                Some(&order[cursor - bs..cursor])
            }
            _ => None,
        };
        let probs = soft.probs();
        let w = soft_weights(&cbs.codebooks, &probs, &layout);
        let (recon, l1, upstream) = objective.data_terms(&w, rows);
        let beta = sched.beta(step);
        let l2_weight = sched.lambda_at(step) * probs.len() as f64;
        let parts = assemble(recon, l1, l2_penalty(&probs, beta), l2_weight);
        trace.push(TraceRow {
            step,
            total: parts.total,
            recon,
            l1,
            l2: parts.l2,
            beta,
        });
        if !parts.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let data = recon + l1;
        let initial = *initial_data.get_or_insert(data);
        if data > 1e3 * initial.max(floor) {
            return Err(Error::Diverged {
                step,
                loss: data,
                initial,
            });
        }

        let gc: Vec<f64> = grad_codebooks(&cbs.codebooks, &probs, &upstream, &layout)
            .into_iter()
            .flatten()
            .collect();
        let gi = match sched.rule {
            MappingRule::Frozen => None,
            MappingRule::Naive => Some(grad_logits_naive(&cbs.codebooks, &probs, &upstream, &layout)),
            MappingRule::Proximal => Some(grad_logits_proximal(&cbs.codebooks, &soft.logits, &upstream, &layout)),
        };
        let mut flat: Vec<f64> = cbs.codebooks.iter().flatten().copied().collect();
        adam_c.step(&mut flat, &gc);
        for (c, chunk) in cbs.codebooks.iter_mut().zip(flat.chunks_exact(m)) {
            c.copy_from_slice(chunk);
        }
        if let Some(mut gi) = gi {
            if l2_weight > 0.0 {
                for (g, r) in gi.iter_mut().zip(l2_logit_grad(&probs, m, beta)) {
                    *g += l2_weight * r;
                }
            }
            adam_i.step(&mut soft.logits, &gi);
        }
    }
    Ok(LayerOutcome {
        codebooks: cbs,
        mapping: soft,
        trace,
    })
}

/// Round to a finite half-precision value, saturating at the largest finite one.
pub fn to_f16_value(v: f64) -> f64 {
    let max = f16::MAX.to_f64();
    f16::from_f64(v.clamp(-max, max)).to_f64()
}

/// Storage form of a hard assignment: codewords and scales rounded to half
/// precision, each codebook sorted ascending with indices remapped.
pub fn harden(cbs: &CodebookSet, map: &HardMapping) -> (CodebookSet, HardMapping) {
    let mut codebooks = Vec::with_capacity(cbs.codebooks.len());
    let mut remap = Vec::with_capacity(cbs.codebooks.len());
    for c in &cbs.codebooks {
        let rounded: Vec<f64> = c.iter().map(|&v| to_f16_value(v)).collect();
        let mut order: Vec<usize> = (0..rounded.len()).collect();
        order.sort_by(|&a, &b| rounded[a].total_cmp(&rounded[b]).then(a.cmp(&b)));
        let mut new_of_old = vec![0u32; rounded.len()];
        for (new, &old) in order.iter().enumerate() {
            new_of_old[old] = new as u32;
        }
        codebooks.push(order.iter().map(|&o| rounded[o]).collect());
        remap.push(new_of_old);
    }
    let row_cb = cbs.row_codebooks();
    let indices = map
        .indices
        .iter()
        .enumerate()
        .map(|(w, &i)| remap[row_cb[w / map.n_i]][i as usize])
        .collect();
    (
        CodebookSet {
            codebooks,
            scales: cbs.scales.as_ref().map(|s| s.iter().map(|&v| to_f16_value(v)).collect()),
            row_group_boundaries: cbs.row_group_boundaries.clone(),
        },
        HardMapping {
            n_o: map.n_o,
            n_i: map.n_i,
            indices,
        },
    )
}

/// Hard assignment by argmax (lowest index on ties), then [`harden`].
pub fn finalize(cbs: &CodebookSet, soft: &SoftMapping) -> Result<(CodebookSet, HardMapping)> {
    check_shapes(cbs, soft)?;
    Ok(harden(cbs, &soft.hard()))
}
