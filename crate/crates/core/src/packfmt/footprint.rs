use serde::{Deserialize, Serialize};

use super::CompressedModel;
use crate::error::{Error, Result};
use crate::model::ModelContainer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFootprint {
    pub index: usize,
    pub n_o: usize,
    pub n_i: usize,
    pub codewords: usize,
    pub scales: usize,
    pub bias: usize,
    pub bits_per_index: u32,
    /// Weight bits of this layer.
    pub m_w: u64,
    /// Input plus output features at half precision.
    pub m_a: u64,
    /// Half-precision size of the original parameters.
    pub m_ref: u64,
}

/// All quantities are in bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub m_w: u64,
    pub m_a: u64,
    pub m_ref: u64,
    pub m: u64,
    /// `m_ref / m`.
    pub alpha_achieved: f64,
    /// `m_ref / m_w`: the ratio on weights alone.
    pub alpha_weights: f64,
    pub layers: Vec<LayerFootprint>,
}

impl FootprintReport {
    /// Whole bytes needed for `m`.
    pub fn m_bytes(&self) -> u64 {
        self.m.div_ceil(8)
    }

    pub fn weight_share(&self) -> f64 {
        self.m_w as f64 / self.m as f64
    }
}

/// Weight bits are 16 per codeword, scale and bias entry plus the packed index
/// bits. Activation bits assume sequential execution with the input and output
/// of one layer alive at a time.
pub fn measure_footprint(compressed: &CompressedModel, original: &ModelContainer) -> Result<FootprintReport> {
    if compressed.layers.len() != original.layers.len() {
        return Err(Error::DimensionMismatch(format!(
            "compressed model has {} layers, original {}",
            compressed.layers.len(),
            original.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(compressed.layers.len());
    for (index, (c, o)) in compressed.layers.iter().zip(&original.layers).enumerate() {
        if c.n_o != o.n_o() || c.n_i != o.n_i() {
            return Err(Error::DimensionMismatch(format!(
                "layer {index} is {}x{} compressed but {}x{} originally",
                c.n_o,
                c.n_i,
                o.n_o(),
                o.n_i()
            )));
        }
        let bias = c.bias.as_ref().map_or(0, Vec::len);
        let params = (c.codewords.len() + c.scales.len() + bias) as u64;
        layers.push(LayerFootprint {
            index,
            n_o: c.n_o,
            n_i: c.n_i,
            codewords: c.codewords.len(),
            scales: c.scales.len(),
            bias,
            bits_per_index: c.bits_per_index(),
            m_w: 16 * params + c.bits_per_index() as u64 * c.numel() as u64,
            m_a: 16 * (c.n_i + c.n_o) as u64,
            m_ref: 16 * o.num_params() as u64,
        });
    }
    let m_w: u64 = layers.iter().map(|l| l.m_w).sum();
    let m_a = layers.iter().map(|l| l.m_a).max().unwrap_or(0);
    let m_ref: u64 = layers.iter().map(|l| l.m_ref).sum();
    let m = m_w + m_a;
    Ok(FootprintReport {
        m_w,
        m_a,
        m_ref,
        m,
        alpha_achieved: m_ref as f64 / m as f64,
        alpha_weights: m_ref as f64 / m_w as f64,
        layers,
    })
}
