//! Per-residue embedding matrices: the binary file format, a keyed store, and
//! a deterministic synthetic embedder for small-scale runs.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic   "DDSEQEMB"   8 bytes
//! version u32          = 1
//! d_e     u32
//! count   u64
//! dtype   u8           0 = f32
//! count x record:
//!   id_len u32, id bytes (utf-8)
//!   L      u32
//!   L x d_e f32 values, row-major
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::dataio::{Reader, SequenceEntry, Token, MAX_LEN, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DDSEQEMB";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Embeddings for one sequence, `L x d_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub seq_id: String,
    pub values: Tensor<f32>,
}

impl EmbeddingMatrix {
    pub fn new(seq_id: impl Into<String>, values: Tensor<f32>) -> Result<Self> {
        let seq_id = seq_id.into();
        if values.shape().len() != 2 {
            return Err(Error::Format(format!(
                "embedding `{seq_id}` must be 2-D, got shape {:?}",
                values.shape()
            )));
        }
        if values.shape()[0] > MAX_LEN {
            return Err(Error::Format(format!(
                "embedding `{seq_id}` has {} rows, more than {MAX_LEN}",
                values.shape()[0]
            )));
        }
        values.check_finite(&format!("embedding `{seq_id}`"))?;
        Ok(EmbeddingMatrix { seq_id, values })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_e(&self) -> usize {
        self.values.shape()[1]
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Value in `[-1, 1)` for one `(seed, token, dim)` triple.
fn hashed_unit(seed: u64, token: Token, dim: usize) -> f32 {
    let h = splitmix64(splitmix64(splitmix64(seed) ^ token as u64) ^ dim as u64);
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    (2.0 * u - 1.0) as f32
}

/// Deterministic per-token embedding: identical tokens get identical rows
/// and padding maps to zeros.
pub fn synthetic_embed(seq_id: &str, tokens: &[Token], d_e: usize, seed: u64) -> Result<EmbeddingMatrix> {
    if d_e == 0 {
        return Err(Error::Config("d_e must be at least 1".into()));
    }
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut data = Vec::with_capacity(tokens.len() * d_e);
    for &t in tokens {
        if t == PAD {
            data.extend(std::iter::repeat_n(0.0f32, d_e));
        } else {
            data.extend((0..d_e).map(|d| hashed_unit(seed, t, d)));
        }
    }
    EmbeddingMatrix::new(seq_id, Tensor::new(vec![tokens.len(), d_e], data)?)
}

/// Serializes embeddings; all records must share one `d_e`. An empty list
/// needs the width supplied explicitly.
pub fn encode_embeddings(d_e: usize, records: &[EmbeddingMatrix]) -> Result<Vec<u8>> {
    if d_e == 0 {
        return Err(Error::Format("d_e must be positive".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(d_e as u32).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    buf.push(DTYPE_F32);
    for r in records {
        if r.d_e() != d_e {
            return Err(Error::Format(format!(
                "embedding `{}` has width {}, file width is {d_e}",
                r.seq_id,
                r.d_e()
            )));
        }
        buf.extend_from_slice(&(r.seq_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.seq_id.as_bytes());
        buf.extend_from_slice(&(r.len() as u32).to_le_bytes());
        for v in r.values.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_embedding_file(path: &Path, d_e: usize, records: &[EmbeddingMatrix]) -> Result<()> {
    let bytes = encode_embeddings(d_e, records)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Embeddings loaded from a file, in file order, with lookup by id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    d_e: usize,
    records: Vec<EmbeddingMatrix>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn from_records(d_e: usize, records: Vec<EmbeddingMatrix>) -> Result<Self> {
        if d_e == 0 {
            return Err(Error::Format("d_e must be positive".into()));
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.d_e() != d_e {
                return Err(Error::Format(format!(
                    "embedding `{}` has width {}, expected {d_e}",
                    r.seq_id,
                    r.d_e()
                )));
            }
            if index.insert(r.seq_id.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate embedding id `{}`", r.seq_id)));
            }
        }
        Ok(EmbeddingStore { d_e, records, index })
    }

    pub fn decode(buf: &[u8], what: &str) -> Result<Self> {
        let mut r = Reader::new(buf, what);
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("{what}: unsupported embedding version {version}")));
        }
        let d_e = r.u32()? as usize;
        let count = r.u64()?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("{what}: unsupported dtype {dtype}")));
        }
        if d_e == 0 {
            return Err(Error::Format(format!("{what}: d_e is zero")));
        }
        let mut records = Vec::new();
        for _ in 0..count {
            let id = r.string()?;
            let len = r.u32()? as usize;
            if len == 0 || len > MAX_LEN {
                return Err(Error::Format(format!(
                    "{what}: embedding `{id}` has {len} rows, expected 1..={MAX_LEN}"
                )));
            }
            let raw = r.take(len * d_e * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let values = Tensor::new(vec![len, d_e], data)?;
            let m = EmbeddingMatrix::new(id, values).map_err(|e| match e {
                Error::NonFinite(w) => Error::Format(format!("{what}: non-finite value in {w}")),
                other => other,
            })?;
            records.push(m);
        }
        r.finish()?;
        Self::from_records(d_e, records)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_embedding_file(path, self.d_e, &self.records)
    }

    pub fn d_e(&self) -> usize {
        self.d_e
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingMatrix] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Result<&EmbeddingMatrix> {
        self.index
            .get(id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    }

    /// Fails with a config mismatch when the file width differs from the
    /// model's.
    pub fn check_d_e(&self, expected: usize) -> Result<()> {
        if self.d_e != expected {
            return Err(Error::ConfigMismatch(format!(
                "embeddings have d_e = {}, model expects {expected}",
                self.d_e
            )));
        }
        Ok(())
    }

    /// Checks that every listed sequence is present with one row per token.
    pub fn check_covers(&self, sequences: &[SequenceEntry]) -> Result<()> {
        let missing: BTreeSet<String> = sequences
            .iter()
            .filter(|s| !self.index.contains_key(&s.id))
            .map(|s| s.id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingEmbeddings(missing.into_iter().collect()));
        }
        for s in sequences {
            let m = self.get(&s.id)?;
            if m.len() != s.length {
                return Err(Error::Format(format!(
                    "embedding `{}` has {} rows but the sequence has {} tokens",
                    s.id,
                    m.len(),
                    s.length
                )));
            }
        }
        Ok(())
    }

    /// A store restricted to `sequences`, in their order.
    pub fn subset(&self, sequences: &[SequenceEntry]) -> Result<Self> {
        self.check_covers(sequences)?;
        let records = sequences
            .iter()
            .map(|s| self.get(&s.id).cloned())
            .collect::<Result<Vec<_>>>()?;
        Self::from_records(self.d_e, records)
    }
}
