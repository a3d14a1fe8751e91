//! On-disk layout of uncompressed models (`JLCM`) and calibration batches (`JCAL`).
//!
//! Both formats are little-endian. A model file is
//!
//! ```text
//! "JLCM" | u8 version=1 | u8 dtype (0=f32, 1=f16) | u32 L
//! L x { u32 n_o | u32 n_i | u8 activation | u8 has_bias }
//! L x { weights (n_o*n_i, row-major) | bias (n_o, if present) }
//! ```
//!
//! A calibration file is `"JCAL" | u32 B | u32 width | B*width f32`.

use std::fs;
use std::path::Path;

use half::f16;

use crate::bytes::{checked_u32, put_u32, Reader};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Activation, CalibrationSet, LinearLayer, ModelContainer, StorageDtype};

pub const MODEL_MAGIC: &[u8; 4] = b"JLCM";
pub const CALIB_MAGIC: &[u8; 4] = b"JCAL";
pub const MODEL_VERSION: u8 = 1;

struct LayerHeader {
    n_o: usize,
    n_i: usize,
    activation: Activation,
    has_bias: bool,
}

impl StorageDtype {
    fn tag(self) -> u8 {
        match self {
            StorageDtype::F32 => 0,
            StorageDtype::F16 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            StorageDtype::F32 => 4,
            StorageDtype::F16 => 2,
        }
    }
}

pub fn encode_container(model: &ModelContainer, dtype: StorageDtype) -> Result<Vec<u8>> {
    model.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.push(dtype.tag());
    put_u32(&mut out, checked_u32(model.layers.len(), "layer count")?);
    for layer in &model.layers {
        put_u32(&mut out, checked_u32(layer.n_o(), "n_o")?);
        put_u32(&mut out, checked_u32(layer.n_i(), "n_i")?);
        out.push(layer.activation.tag());
        out.push(layer.bias.is_some() as u8);
    }
    let mut put = |vals: &[f32]| match dtype {
        StorageDtype::F32 => vals
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        StorageDtype::F16 => vals
            .iter()
            .for_each(|v| out.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
    };
    for layer in &model.layers {
        put(layer.weights.as_slice());
        if let Some(bias) = &layer.bias {
            put(bias);
        }
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8], name: &str) -> Result<ModelContainer> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    let version = r.u8("version")?;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = match r.u8("dtype")? {
        0 => StorageDtype::F32,
        1 => StorageDtype::F16,
        t => return Err(Error::MalformedHeader(format!("unknown dtype tag {t}"))),
    };
    let num_layers = r.u32("layer count")? as usize;
    if num_layers == 0 {
        return Err(Error::MalformedHeader("model has no layers".into()));
    }
    let mut headers = Vec::with_capacity(num_layers.min(1 << 16));
    for l in 0..num_layers {
        let n_o = r.u32("n_o").map_err(|_| header_truncated(l))? as usize;
        let n_i = r.u32("n_i").map_err(|_| header_truncated(l))? as usize;
        let act = r.u8("activation").map_err(|_| header_truncated(l))?;
        let has_bias = r.u8("has_bias").map_err(|_| header_truncated(l))?;
        let activation = Activation::from_tag(act)
            .ok_or_else(|| Error::MalformedHeader(format!("layer {l}: unknown activation tag {act}")))?;
        if has_bias > 1 {
            return Err(Error::MalformedHeader(format!("layer {l}: has_bias flag {has_bias}")));
        }
        if n_o == 0 || n_i == 0 {
            return Err(Error::MalformedHeader(format!("layer {l}: empty shape {n_o}x{n_i}")));
        }
        headers.push(LayerHeader {
            n_o,
            n_i,
            activation,
            has_bias: has_bias == 1,
        });
    }
    for l in 1..headers.len() {
        if headers[l - 1].n_o != headers[l].n_i {
            return Err(Error::DimensionIncompatibility {
                layer: l,
                expected: headers[l - 1].n_o,
                found: headers[l].n_i,
            });
        }
    }

    let width = dtype.width();
    let expected: usize = headers
        .iter()
        .map(|h| (h.n_o * h.n_i + if h.has_bias { h.n_o } else { 0 }) * width)
        .sum();
    if r.remaining() != expected {
        return Err(Error::BlobLengthMismatch {
            expected,
            actual: r.remaining(),
        });
    }

    let mut read = |n: usize| -> Result<Vec<f32>> {
        let raw = r.take(n * width, "tensor blob")?;
        Ok(match dtype {
            StorageDtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            StorageDtype::F16 => raw
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        })
    };
    let mut layers = Vec::with_capacity(headers.len());
    for (l, h) in headers.iter().enumerate() {
        let weights = Matrix::from_vec(h.n_o, h.n_i, read(h.n_o * h.n_i)?)?;
        let bias = if h.has_bias { Some(read(h.n_o)?) } else { None };
        let layer = LinearLayer {
            weights,
            bias,
            activation: h.activation,
        };
        layer.validate().map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("layer {l} {what}")),
            other => other,
        })?;
        layers.push(layer);
    }
    Ok(ModelContainer {
        name: name.to_string(),
        dtype_stored: dtype,
        layers,
    })
}

fn header_truncated(layer: usize) -> Error {
    Error::MalformedHeader(format!("header truncated in layer {layer}"))
}

/// Load a model; the container name is taken from the file stem.
pub fn load_container(path: impl AsRef<Path>) -> Result<ModelContainer> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_container(&bytes, &name)
}

pub fn save_container(model: &ModelContainer, path: impl AsRef<Path>, dtype: StorageDtype) -> Result<()> {
    fs::write(path, encode_container(model, dtype)?)?;
    Ok(())
}

pub fn encode_calibration(calib: &CalibrationSet) -> Result<Vec<u8>> {
    let m = &calib.inputs;
    let mut out = Vec::with_capacity(12 + m.len() * 4);
    out.extend_from_slice(CALIB_MAGIC);
    put_u32(&mut out, checked_u32(m.rows(), "batch size")?);
    put_u32(&mut out, checked_u32(m.cols(), "width")?);
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_calibration(bytes: &[u8]) -> Result<CalibrationSet> {
    let mut r = Reader::new(bytes);
    r.magic(CALIB_MAGIC)?;
    let batch = r.u32("batch size")? as usize;
    let width = r.u32("width")? as usize;
    let expected = batch * width * 4;
    if r.remaining() != expected {
        return Err(Error::BlobLengthMismatch {
            expected,
            actual: r.remaining(),
        });
    }
    let data = r
        .take(expected, "calibration blob")?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    CalibrationSet::new(Matrix::from_vec(batch, width, data)?)
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<CalibrationSet> {
    decode_calibration(&fs::read(path)?)
}

pub fn save_calibration(calib: &CalibrationSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_calibration(calib)?)?;
    Ok(())
}
