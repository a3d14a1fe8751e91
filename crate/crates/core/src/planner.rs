//! Resolve the compression goal `alpha` into per-layer structure.
//!
//! Indices cost `log2 |C|` bits each with `|C| = 2^floor(16 / alpha)`. What is
//! left of the `16 |W| / alpha` budget after the indices pays for 16-bit
//! parameters: scales (one codebook plus `s` scales) or whole codebooks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    MultiScale,
    MultiCodebook,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::MultiScale => "multi-scale",
            Mode::MultiCodebook => "multi-codebook",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi-scale" | "multi_scale" => Ok(Mode::MultiScale),
            "multi-codebook" | "multi_codebook" => Ok(Mode::MultiCodebook),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub alpha: f64,
    pub mode: Mode,
    pub codebook_size: usize,
    /// Codebooks in the layer; always 1 in multi-scale mode.
    pub num_codebooks: usize,
    /// Scale factors in the layer; always 0 in multi-codebook mode.
    pub num_scales: usize,
    pub bits_per_index: u32,
}

impl CompressionPlan {
    /// Number of contiguous row groups: codebooks or scales depending on the mode.
    pub fn num_groups(&self) -> usize {
        match self.mode {
            Mode::MultiScale => self.num_scales,
            Mode::MultiCodebook => self.num_codebooks,
        }
    }
}

pub fn validate_alpha(alpha: f64) -> Result<()> {
    if !alpha.is_finite() || alpha <= 1.0 || alpha > 16.0 {
        return Err(Error::InvalidAlpha(alpha));
    }
    Ok(())
}

/// `floor(16 / alpha)`, nudged so that exact quotients such as `16 / (16 / 3)`
/// are not lost to rounding.
pub fn bits_for_alpha(alpha: f64) -> Result<u32> {
    validate_alpha(alpha)?;
    Ok(((16.0 / alpha) + 1e-9).floor() as u32)
}

pub fn derive_plan(n_o: usize, n_i: usize, alpha: f64, mode: Mode) -> Result<CompressionPlan> {
    if n_o == 0 || n_i == 0 {
        return Err(Error::DimensionMismatch(format!("cannot plan a {n_o}x{n_i} layer")));
    }
    let bits = bits_for_alpha(alpha)?;
    let codebook_size = 1usize << bits;
    let numel = (n_o * n_i) as f64;
    let slack_bits = ((16.0 - alpha * bits as f64) * numel / alpha).max(0.0);
    let clamp = |v: f64| (v.floor() as usize).clamp(1, n_o);
    let (num_codebooks, num_scales) = match mode {
        Mode::MultiScale => (1, clamp(slack_bits / 16.0)),
        Mode::MultiCodebook => (clamp(slack_bits / (16.0 * codebook_size as f64)), 0),
    };
    Ok(CompressionPlan {
        alpha,
        mode,
        codebook_size,
        num_codebooks,
        num_scales,
        bits_per_index: bits,
    })
}

/// Weight footprint in bits implied by a plan: 16-bit codewords and scales plus
/// the packed indices.
pub fn predicted_footprint(plan: &CompressionPlan, n_o: usize, n_i: usize) -> u64 {
    let numel = (n_o * n_i) as u64;
    let params = plan.num_codebooks as u64 * plan.codebook_size as u64 + plan.num_scales as u64;
    16 * params + plan.bits_per_index as u64 * numel
}
