//! Compressed model artifact (`JLCZ`) and footprint accounting.
//!
//! ```text
//! "JLCZ" | u8 version=1 | u32 L
//! L x {
//!   u8 mode (0=multi-scale, 1=multi-codebook, 2=passthrough)
//!   u32 n_o | u32 n_i | u8 activation | u8 has_bias
//!   u16 codebook_size | u16 k | u32 num_scales
//!   k*codebook_size f16 codewords | num_scales f16 scales | n_o f16 bias (if present)
//!   u32 bitstream bytes | bitstream
//! }
//! ```
//!
//! Passthrough layers have no codebooks; their bitstream holds the raw f16
//! weights, which is the same as packing the half-precision bit patterns at 16
//! bits per index.

mod bits;
mod footprint;

use std::fs;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::bytes::{checked_u32, put_f16s, put_u16, put_u32, Reader};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Activation, LinearLayer, ModelContainer};
use crate::planner::Mode;
use crate::reorder::{group_boundaries, CodebookSet, HardMapping};

pub use bits::{pack_indices, packed_len, unpack_indices, IndexReader, MAX_BITS};
pub use footprint::{measure_footprint, FootprintReport, LayerFootprint};

pub const COMPRESSED_MAGIC: &[u8; 4] = b"JLCZ";
pub const COMPRESSED_VERSION: u8 = 1;
/// Bytes before the first layer record.
pub const FILE_HEADER_BYTES: usize = 9;
/// Fixed bytes of a layer record, including the bitstream length field.
pub const LAYER_HEADER_BYTES: usize = 23;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    MultiScale,
    MultiCodebook,
    Passthrough,
}

impl LayerMode {
    fn tag(self) -> u8 {
        match self {
            LayerMode::MultiScale => 0,
            LayerMode::MultiCodebook => 1,
            LayerMode::Passthrough => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(LayerMode::MultiScale),
            1 => Some(LayerMode::MultiCodebook),
            2 => Some(LayerMode::Passthrough),
            _ => None,
        }
    }
}

impl From<Mode> for LayerMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::MultiScale => LayerMode::MultiScale,
            Mode::MultiCodebook => LayerMode::MultiCodebook,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub mode: LayerMode,
    pub n_o: usize,
    pub n_i: usize,
    pub activation: Activation,
    /// Codewords per codebook; 0 for passthrough.
    pub codebook_size: usize,
    /// Number of codebooks; 0 for passthrough.
    pub num_codebooks: usize,
    /// All codebooks back to back.
    pub codewords: Vec<f16>,
    pub scales: Vec<f16>,
    pub bias: Option<Vec<f16>>,
    pub bitstream: Vec<u8>,
}

fn f16s(values: &[f64]) -> Vec<f16> {
    values.iter().map(|&v| f16::from_f64(v)).collect()
}

impl CompressedLayer {
    /// Package a hard assignment. Codewords and scales are rounded to half
    /// precision here, so callers normally pass already hardened codebooks.
    pub fn from_parts(cbs: &CodebookSet, map: &HardMapping, layer: &LinearLayer) -> Result<Self> {
        cbs.validate()?;
        if map.n_o != layer.n_o() || map.n_i != layer.n_i() || cbs.n_o() != layer.n_o() {
            return Err(Error::DimensionMismatch("codebooks and mapping do not match the layer".into()));
        }
        let size = cbs.codebook_size();
        if !size.is_power_of_two() || size < 2 {
            return Err(Error::InvalidArgument(format!("codebook size {size} is not a power of two >= 2")));
        }
        let bits = size.trailing_zeros();
        Ok(Self {
            mode: cbs.mode().into(),
            n_o: layer.n_o(),
            n_i: layer.n_i(),
            activation: layer.activation,
            codebook_size: size,
            num_codebooks: cbs.codebooks.len(),
            codewords: cbs.codebooks.iter().flat_map(|c| f16s(c)).collect(),
            scales: cbs.scales.as_deref().map(f16s).unwrap_or_default(),
            bias: layer.bias.as_ref().map(|b| b.iter().map(|&v| f16::from_f32(v)).collect()),
            bitstream: pack_indices(&map.indices, bits)?,
        })
    }

    /// Store a layer uncompressed, as half-precision weights.
    pub fn passthrough(layer: &LinearLayer) -> Self {
        let raw: Vec<u32> = layer
            .weights
            .as_slice()
            .iter()
            .map(|&v| f16::from_f32(v).to_bits() as u32)
            .collect();
        Self {
            mode: LayerMode::Passthrough,
            n_o: layer.n_o(),
            n_i: layer.n_i(),
            activation: layer.activation,
            codebook_size: 0,
            num_codebooks: 0,
            codewords: Vec::new(),
            scales: Vec::new(),
            bias: layer.bias.as_ref().map(|b| b.iter().map(|&v| f16::from_f32(v)).collect()),
            bitstream: pack_indices(&raw, 16).expect("16-bit patterns fit"),
        }
    }

    pub fn bits_per_index(&self) -> u32 {
        match self.mode {
            LayerMode::Passthrough => 16,
            _ => self.codebook_size.trailing_zeros(),
        }
    }

    pub fn numel(&self) -> usize {
        self.n_o * self.n_i
    }

    fn group_count(&self) -> usize {
        match self.mode {
            LayerMode::MultiScale => self.scales.len(),
            LayerMode::MultiCodebook => self.num_codebooks,
            LayerMode::Passthrough => 1,
        }
    }

    /// Codebooks and scales widened to f64; `None` for passthrough layers.
    pub fn codebook_set(&self) -> Option<CodebookSet> {
        if self.mode == LayerMode::Passthrough {
            return None;
        }
        Some(CodebookSet {
            codebooks: self
                .codewords
                .chunks_exact(self.codebook_size)
                .map(|c| c.iter().map(|v| v.to_f64()).collect())
                .collect(),
            scales: (self.mode == LayerMode::MultiScale).then(|| self.scales.iter().map(|v| v.to_f64()).collect()),
            row_group_boundaries: group_boundaries(self.n_o, self.group_count()),
        })
    }

    pub fn hard_mapping(&self) -> Result<Option<HardMapping>> {
        if self.mode == LayerMode::Passthrough {
            return Ok(None);
        }
        Ok(Some(HardMapping {
            n_o: self.n_o,
            n_i: self.n_i,
            indices: unpack_indices(&self.bitstream, self.bits_per_index(), self.numel())?,
        }))
    }

    /// Decoded weights of each row in turn, without materializing the matrix.
    pub fn rows(&self) -> impl Iterator<Item = Vec<f32>> + '_ {
        let mut reader = IndexReader::new(&self.bitstream, self.bits_per_index());
        (0..self.n_o).map(move |r| {
            let (lookup, scale): (&[f16], f64) = match self.mode {
                LayerMode::Passthrough => (&[], 1.0),
                LayerMode::MultiScale => {
                    let g = group_of(r, self.n_o, self.scales.len());
                    (&self.codewords[..], self.scales[g].to_f64())
                }
                LayerMode::MultiCodebook => {
                    let g = group_of(r, self.n_o, self.num_codebooks);
                    (&self.codewords[g * self.codebook_size..(g + 1) * self.codebook_size], 1.0)
                }
            };
            (0..self.n_i)
                .map(|_| {
                    let idx = reader.next().expect("bitstream length checked");
                    if self.mode == LayerMode::Passthrough {
                        f16::from_bits(idx as u16).to_f32()
                    } else {
                        (scale * lookup[idx as usize].to_f64()) as f32
                    }
                })
                .collect()
        })
    }

    pub fn reconstruct(&self) -> Matrix {
        let data: Vec<f32> = self.rows().flatten().collect();
        Matrix::from_vec(self.n_o, self.n_i, data).expect("rows have n_i entries")
    }

    pub fn to_linear(&self) -> Result<LinearLayer> {
        LinearLayer::new(
            self.reconstruct(),
            self.bias.as_ref().map(|b| b.iter().map(|v| v.to_f32()).collect()),
            self.activation,
        )
    }

    /// `act(W~ x + b)` decoding one row of weights at a time.
    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        if inputs.cols() != self.n_i {
            return Err(Error::DimensionMismatch(format!(
                "inputs have width {}, layer expects {}",
                inputs.cols(),
                self.n_i
            )));
        }
        let batch = inputs.rows();
        let mut out = Matrix::zeros(batch, self.n_o);
        for (o, w) in self.rows().enumerate() {
            let b = self.bias.as_ref().map_or(0.0, |b| b[o].to_f32() as f64);
            for r in 0..batch {
                let z = b + w.iter().zip(inputs.row(r)).map(|(a, x)| *a as f64 * *x as f64).sum::<f64>();
                out.set(r, o, self.activation.apply(z) as f32);
            }
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        if self.n_o == 0 || self.n_i == 0 {
            return Err(Error::MalformedHeader("empty layer".into()));
        }
        if self.mode != LayerMode::Passthrough {
            if self.codebook_size < 2 || !self.codebook_size.is_power_of_two() {
                return Err(Error::MalformedHeader(format!(
                    "codebook size {} is not a power of two >= 2",
                    self.codebook_size
                )));
            }
            let (k, s) = (self.num_codebooks, self.scales.len());
            let ok = match self.mode {
                LayerMode::MultiScale => k == 1 && (1..=self.n_o).contains(&s),
                _ => (1..=self.n_o).contains(&k) && s == 0,
            };
            if !ok {
                return Err(Error::MalformedHeader(format!(
                    "{k} codebooks and {s} scales are inconsistent with the mode or {} rows",
                    self.n_o
                )));
            }
        } else if self.codebook_size != 0 || self.num_codebooks != 0 || !self.scales.is_empty() {
            return Err(Error::MalformedHeader("passthrough layer with codebooks".into()));
        }
        let finite = |v: &[f16]| v.iter().all(|x| x.is_finite());
        if !finite(&self.codewords) || !finite(&self.scales) || !self.bias.as_deref().is_none_or(finite) {
            return Err(Error::NonFinite("compressed layer parameters".into()));
        }
        if self.scales.iter().any(|s| s.to_f64() <= 0.0) {
            return Err(Error::MalformedHeader("non-positive scale".into()));
        }
        let bits = self.bits_per_index() as usize;
        let expected = packed_len(self.numel(), bits as u32);
        if self.bitstream.len() != expected {
            return Err(Error::BlobLengthMismatch {
                expected,
                actual: self.bitstream.len(),
            });
        }
        let used = self.numel() * bits;
        if !used.is_multiple_of(8) && self.bitstream[expected - 1] >> (used % 8) != 0 {
            return Err(Error::MalformedHeader("non-zero padding bits".into()));
        }
        if self.mode == LayerMode::Passthrough
            && IndexReader::new(&self.bitstream, 16)
                .take(self.numel())
                .any(|v| !f16::from_bits(v as u16).is_finite())
        {
            return Err(Error::NonFinite("passthrough weights".into()));
        }
        Ok(())
    }
}

fn group_of(row: usize, n_o: usize, groups: usize) -> usize {
    // Largest g with floor(g * n_o / groups) <= row.
    let mut g = (row * groups) / n_o;
    while g + 1 < groups && (g + 1) * n_o / groups <= row {
        g += 1;
    }
    while g > 0 && g * n_o / groups > row {
        g -= 1;
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub layers: Vec<CompressedLayer>,
}

impl CompressedModel {
    /// Every layer stored as raw half-precision weights.
    pub fn passthrough(model: &ModelContainer) -> Self {
        Self {
            layers: model.layers.iter().map(CompressedLayer::passthrough).collect(),
        }
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut x = inputs.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Eagerly decoded model.
    pub fn to_model(&self, name: &str) -> Result<ModelContainer> {
        let layers = self.layers.iter().map(CompressedLayer::to_linear).collect::<Result<_>>()?;
        ModelContainer::new(name, layers)
    }

    fn validate(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if l > 0 && self.layers[l - 1].n_o != layer.n_i {
                return Err(Error::DimensionIncompatibility {
                    layer: l,
                    expected: self.layers[l - 1].n_o,
                    found: layer.n_i,
                });
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(COMPRESSED_MAGIC);
        out.push(COMPRESSED_VERSION);
        put_u32(&mut out, checked_u32(self.layers.len(), "layer count")?);
        for layer in &self.layers {
            out.push(layer.mode.tag());
            put_u32(&mut out, checked_u32(layer.n_o, "n_o")?);
            put_u32(&mut out, checked_u32(layer.n_i, "n_i")?);
            out.push(layer.activation.tag());
            out.push(layer.bias.is_some() as u8);
            let size = u16::try_from(layer.codebook_size)
                .map_err(|_| Error::InvalidArgument("codebook size exceeds u16".into()))?;
            let k = u16::try_from(layer.num_codebooks)
                .map_err(|_| Error::InvalidArgument("codebook count exceeds u16".into()))?;
            put_u16(&mut out, size);
            put_u16(&mut out, k);
            put_u32(&mut out, checked_u32(layer.scales.len(), "scale count")?);
            put_f16s(&mut out, &layer.codewords);
            put_f16s(&mut out, &layer.scales);
            if let Some(b) = &layer.bias {
                put_f16s(&mut out, b);
            }
            put_u32(&mut out, checked_u32(layer.bitstream.len(), "bitstream length")?);
            out.extend_from_slice(&layer.bitstream);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(COMPRESSED_MAGIC)?;
        let version = r.u8("version")?;
        if version != COMPRESSED_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32("layer count")? as usize;
        let mut layers = Vec::new();
        for _ in 0..count {
            let tag = r.u8("mode")?;
            let mode = LayerMode::from_tag(tag).ok_or_else(|| Error::MalformedHeader(format!("unknown mode tag {tag}")))?;
            let n_o = r.u32("n_o")? as usize;
            let n_i = r.u32("n_i")? as usize;
            let act = r.u8("activation")?;
            let activation =
                Activation::from_tag(act).ok_or_else(|| Error::MalformedHeader(format!("unknown activation tag {act}")))?;
            let has_bias = match r.u8("has_bias")? {
                0 => false,
                1 => true,
                v => return Err(Error::MalformedHeader(format!("has_bias flag {v}"))),
            };
            let codebook_size = r.u16("codebook size")? as usize;
            let num_codebooks = r.u16("codebook count")? as usize;
            let num_scales = r.u32("scale count")? as usize;
            let codewords = r.f16_vec(num_codebooks * codebook_size, "codewords")?;
            let scales = r.f16_vec(num_scales, "scales")?;
            let bias = if has_bias { Some(r.f16_vec(n_o, "bias")?) } else { None };
            let len = r.u32("bitstream length")? as usize;
            let bitstream = r.take(len, "bitstream")?.to_vec();
            layers.push(CompressedLayer {
                mode,
                n_o,
                n_i,
                activation,
                codebook_size,
                num_codebooks,
                codewords,
                scales,
                bias,
                bitstream,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::MalformedHeader(format!("{} trailing bytes", r.remaining())));
        }
        let model = Self { layers };
        model.validate()?;
        Ok(model)
    }
}

pub fn serialize_compressed(model: &CompressedModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model.encode()?)?;
    Ok(())
}

pub fn deserialize_compressed(path: impl AsRef<Path>) -> Result<CompressedModel> {
    CompressedModel::decode(&fs::read(path)?)
}
