//! Checkpoint file (little-endian):
//!
//! ```text
//! magic    "DDSEQCKP"   8 bytes
//! version  u32          = 1
//! json_len u32, json    header: {"model": ModelConfig, "dtype": "f32"|"f64", "scaler": {..}|null}
//! count    u32          number of tensors, in layout order
//! count x tensor:
//!   name_len u32, name
//!   ndim u32, ndim x u32 dims
//!   values, 4 or 8 bytes each per dtype
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::dataio::{Reader, Scaler};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"DDSEQCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub dtype: String,
    pub scaler: Option<Scaler>,
}

/// A model plus the target scaler it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub scaler: Option<Scaler>,
}

fn dtype_name<T: Scalar>() -> &'static str {
    if T::BITS == 32 {
        "f32"
    } else {
        "f64"
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>, scaler: Option<Scaler>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: model.config().clone(),
        dtype: dtype_name::<T>().into(),
        scaler,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut buf, json.len());
    buf.extend_from_slice(&json);
    put_u32(&mut buf, model.params().len());
    for (spec, p) in model.layout().specs.iter().zip(model.params()) {
        put_u32(&mut buf, spec.name.len());
        buf.extend_from_slice(spec.name.as_bytes());
        put_u32(&mut buf, p.shape().len());
        for &d in p.shape() {
            put_u32(&mut buf, d);
        }
        for &v in p.data() {
            if T::BITS == 32 {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    Ok(buf)
}

fn read_header(r: &mut Reader<'_>, what: &str) -> Result<CheckpointHeader> {
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("{what}: unsupported checkpoint version {version}")));
    }
    let json = r.bytes()?;
    let header: CheckpointHeader = serde_json::from_slice(json)
        .map_err(|e| Error::Format(format!("{what}: bad checkpoint header: {e}")))?;
    header.model.validate()?;
    Ok(header)
}

fn header_precision(h: &CheckpointHeader, what: &str) -> Result<Precision> {
    match h.dtype.as_str() {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(Error::Format(format!("{what}: unknown dtype `{other}`"))),
    }
}

/// Decodes a checkpoint whose stored dtype matches `T`.
pub fn decode_checkpoint<T: Scalar>(buf: &[u8], what: &str) -> Result<Checkpoint<T>> {
    let mut r = Reader::new(buf, what);
    let header = read_header(&mut r, what)?;
    let stored = header_precision(&header, what)?;
    if header.dtype != dtype_name::<T>() {
        return Err(Error::ConfigMismatch(format!(
            "{what}: checkpoint stores {stored:?} values, requested {}",
            dtype_name::<T>()
        )));
    }
    let layout = super::Layout::new(&header.model)?;
    let count = r.u32()? as usize;
    if count != layout.specs.len() {
        return Err(Error::Format(format!(
            "{what}: {count} tensors stored, configuration needs {}",
            layout.specs.len()
        )));
    }
    let width = (T::BITS / 8) as usize;
    let mut params = Vec::with_capacity(count);
    for spec in &layout.specs {
        let name = r.string()?;
        if name != spec.name {
            return Err(Error::Format(format!("{what}: expected tensor `{}`, found `{name}`", spec.name)));
        }
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        if dims != spec.shape {
            return Err(Error::Format(format!(
                "{what}: tensor `{name}` has shape {dims:?}, expected {:?}",
                spec.shape
            )));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * width)?;
        let data: Vec<T> = if T::BITS == 32 {
            raw.chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect()
        };
        let t = Tensor::new(dims, data)?.with_requires_grad(true);
        t.check_finite(&name)
            .map_err(|_| Error::Format(format!("{what}: non-finite values in `{name}`")))?;
        params.push(t);
    }
    r.finish()?;
    Ok(Checkpoint {
        model: Model::from_params(header.model, params)?,
        scaler: header.scaler,
    })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, scaler: Option<Scaler>) -> Result<()> {
    let bytes = encode_checkpoint(model, scaler)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

/// Stored value precision of a checkpoint file.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    let mut r = Reader::new(&bytes, &what);
    let header = read_header(&mut r, &what)?;
    header_precision(&header, &what)
}
