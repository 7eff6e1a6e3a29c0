//! CSV ingestion and the on-disk dataset directory.
//!
//! A dataset directory holds `train.bin`, `val.bin`, `test.bin` and
//! `manifest.json`. Record files are little-endian:
//!
//! ```text
//! magic  "DDSEQREC"        8 bytes
//! version u32
//! count   u64
//! count x record:
//!   payload_len u32        bytes that follow for this record
//!   antigen_id  u32 len + utf-8
//!   antibody_id u32 len + utf-8
//!   antigen     u32 len + len x u8 token
//!   antibody    u32 len + len x u8 token
//!   pkd         f64
//!   pkd_std     f64
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    AffinityRecord, CleanRecord, DropTally, ProcessedDataset, Scaler, SeqKind, SplitDataset,
    SplitName, Token, MAX_LEN, VOCABULARY, VOCAB_SIZE,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const RECORD_MAGIC: &[u8; 8] = b"DDSEQREC";
const RECORD_VERSION: u32 = 1;
const MANIFEST_VERSION: u32 = 1;

/// Column names read from the input CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvColumns {
    pub antigen: String,
    pub heavy: String,
    pub light: String,
    pub kd: String,
}

impl Default for CsvColumns {
    fn default() -> Self {
        CsvColumns {
            antigen: "antigen_seq".into(),
            heavy: "heavy_seq".into(),
            light: "light_seq".into(),
            kd: "kd_nm".into(),
        }
    }
}

/// Reads affinity records from a headered UTF-8 CSV. Blank K_d cells become
/// `None`; cells that fail to parse become `Some(NaN)` so the K_d filter can
/// count them as invalid.
pub fn read_affinity_csv(path: &Path, columns: &CsvColumns) -> Result<Vec<AffinityRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Format(format!("{}: missing column `{name}`", path.display())))
    };
    let (ag, h, l, kd) = (
        find(&columns.antigen)?,
        find(&columns.heavy)?,
        find(&columns.light)?,
        find(&columns.kd)?,
    );
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let cell = |i: usize| row.get(i).unwrap_or("").to_string();
        let kd_text = cell(kd);
        let kd_text = kd_text.trim();
        let kd_nm = if kd_text.is_empty() {
            None
        } else {
            Some(kd_text.parse::<f64>().unwrap_or(f64::NAN))
        };
        out.push(AffinityRecord {
            antigen_seq: cell(ag),
            heavy_seq: cell(h),
            light_seq: cell(l),
            kd_nm,
        });
    }
    Ok(out)
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("length {v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    put_u32(buf, bytes.len())?;
    buf.extend_from_slice(bytes);
    Ok(())
}

fn encode_record(r: &CleanRecord) -> Result<Vec<u8>> {
    let mut p = Vec::new();
    put_bytes(&mut p, r.antigen_id.as_bytes())?;
    put_bytes(&mut p, r.antibody_id.as_bytes())?;
    put_bytes(&mut p, &r.antigen_tokens)?;
    put_bytes(&mut p, &r.antibody_tokens)?;
    p.extend_from_slice(&r.pkd.to_le_bytes());
    p.extend_from_slice(&r.pkd_std.to_le_bytes());
    Ok(p)
}

/// Serializes records to the binary record format.
pub fn encode_records(records: &[CleanRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(RECORD_MAGIC);
    buf.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        let payload = encode_record(r)?;
        put_bytes(&mut buf, &payload)?;
    }
    Ok(buf)
}

pub fn write_records(path: &Path, records: &[CleanRecord]) -> Result<()> {
    let bytes = encode_records(records)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor that reports truncation as a format error.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'a str) -> Self {
        Reader { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("{}: truncated at byte {}", self.what, self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Format(format!("{}: invalid utf-8 string", self.what)))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let got = self.take(8)?;
        if got != expected {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn check_tokens(tokens: &[Token], what: &str) -> Result<()> {
    if tokens.is_empty() || tokens.len() > MAX_LEN {
        return Err(Error::Format(format!("{what}: token length {} outside 1..={MAX_LEN}", tokens.len())));
    }
    if let Some(t) = tokens.iter().find(|&&t| t == 0 || t as usize >= VOCAB_SIZE) {
        return Err(Error::Format(format!("{what}: token {t} outside vocabulary")));
    }
    Ok(())
}

pub fn decode_records(buf: &[u8], what: &str) -> Result<Vec<CleanRecord>> {
    let mut r = Reader::new(buf, what);
    r.magic(RECORD_MAGIC)?;
    let version = r.u32()?;
    if version != RECORD_VERSION {
        return Err(Error::Format(format!("{what}: unsupported record version {version}")));
    }
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let payload = r.bytes()?;
        let mut p = Reader::new(payload, what);
        let rec = CleanRecord {
            antigen_id: p.string()?,
            antibody_id: p.string()?,
            antigen_tokens: p.bytes()?.to_vec(),
            antibody_tokens: p.bytes()?.to_vec(),
            pkd: p.f64()?,
            pkd_std: p.f64()?,
        };
        p.finish()?;
        check_tokens(&rec.antigen_tokens, what)?;
        check_tokens(&rec.antibody_tokens, what)?;
        if !rec.pkd.is_finite() || !rec.pkd_std.is_finite() {
            return Err(Error::Format(format!("{what}: non-finite target")));
        }
        out.push(rec);
    }
    r.finish()?;
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<CleanRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&bytes, &path.display().to_string())
}

/// One distinct sequence referenced by the dataset. Antibodies render as
/// `HEAVY/LIGHT`; `length` is the token count (and so the number of
/// embedding rows expected for this id).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub id: String,
    pub kind: SeqKind,
    pub length: usize,
    pub sequence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabEntry {
    pub symbol: String,
    pub id: Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub input_rows: usize,
    pub retained: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFiles {
    pub train: String,
    pub val: String,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub fractions: [f64; 3],
    pub max_len: usize,
    pub scaler: Scaler,
    pub vocabulary: Vec<VocabEntry>,
    pub counts: SplitCounts,
    pub dropped: DropTally,
    pub files: SplitFiles,
    pub sequences: Vec<SequenceEntry>,
}

impl Manifest {
    pub fn from_processed(p: &ProcessedDataset) -> Self {
        Manifest {
            format_version: MANIFEST_VERSION,
            seed: p.split.seed,
            fractions: p.split.fractions,
            max_len: MAX_LEN,
            scaler: p.scaler,
            vocabulary: VOCABULARY
                .iter()
                .map(|(s, id)| VocabEntry {
                    symbol: (*s).to_string(),
                    id: *id,
                })
                .collect(),
            counts: SplitCounts {
                input_rows: p.input_rows,
                retained: p.split.len(),
                train: p.split.train.len(),
                val: p.split.val.len(),
                test: p.split.test.len(),
            },
            dropped: p.dropped,
            files: SplitFiles {
                train: "train.bin".into(),
                val: "val.bin".into(),
                test: "test.bin".into(),
            },
            sequences: p.sequences.clone(),
        }
    }

    pub fn file_for(&self, split: SplitName) -> &str {
        match split {
            SplitName::Train => &self.files.train,
            SplitName::Val => &self.files.val,
            SplitName::Test => &self.files.test,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported manifest version {}",
                path.display(),
                m.format_version
            )));
        }
        Ok(m)
    }
}

/// A dataset directory loaded into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub split: SplitDataset,
}

impl Dataset {
    /// Writes the processed dataset into `dir`, creating it if needed.
    pub fn write(dir: &Path, processed: &ProcessedDataset) -> Result<Dataset> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest::from_processed(processed);
        for name in [SplitName::Train, SplitName::Val, SplitName::Test] {
            write_records(&dir.join(manifest.file_for(name)), processed.split.part(name))?;
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, manifest.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            split: processed.split.clone(),
        })
    }

    pub fn open(dir: &Path) -> Result<Dataset> {
        let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
        let load = |name| read_records(&dir.join(manifest.file_for(name)));
        let split = SplitDataset {
            train: load(SplitName::Train)?,
            val: load(SplitName::Val)?,
            test: load(SplitName::Test)?,
            seed: manifest.seed,
            fractions: manifest.fractions,
        };
        let counts = [split.train.len(), split.val.len(), split.test.len()];
        let expected = [manifest.counts.train, manifest.counts.val, manifest.counts.test];
        if counts != expected {
            return Err(Error::Format(format!(
                "{}: record counts {counts:?} disagree with manifest {expected:?}",
                dir.display()
            )));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            split,
        })
    }

    pub fn scaler(&self) -> Scaler {
        self.manifest.scaler
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{preprocess, PreprocessConfig};

    fn sample() -> Vec<CleanRecord> {
        vec![
            CleanRecord {
                antigen_id: "ag-1".into(),
                antibody_id: "ab-1".into(),
                antigen_tokens: vec![1, 2, 3],
                antibody_tokens: vec![4, 22, 5],
                pkd: 9.5,
                pkd_std: -0.25,
            },
            CleanRecord {
                antigen_id: "ag-2".into(),
                antibody_id: "ab-2".into(),
                antigen_tokens: vec![21],
                antibody_tokens: vec![20, 22, 1],
                pkd: 7.0,
                pkd_std: 1.0e-17,
            },
        ]
    }

    #[test]
    fn record_round_trip() {
        let recs = sample();
        let bytes = encode_records(&recs).unwrap();
        assert_eq!(decode_records(&bytes, "mem").unwrap(), recs);
        assert_eq!(decode_records(&encode_records(&[]).unwrap(), "mem").unwrap(), vec![]);
    }

    #[test]
    fn corrupt_records_are_format_errors() {
        let mut bytes = encode_records(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_records(&bytes, "mem"), Err(Error::Format(_))));
        let bytes = encode_records(&sample()).unwrap();
        for cut in [3, 12, 25, bytes.len() - 1] {
            assert!(matches!(decode_records(&bytes[..cut], "mem"), Err(Error::Format(_))));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_records(&extra, "mem"), Err(Error::Format(_))));
    }

    #[test]
    fn csv_columns_and_kd_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("in.csv");
        fs::write(&path, "Kd,ag,h,l\n5,MK,EV,DI\n,MK,EV,DI\nabc,MK,EV,DI\n").unwrap();
        let cols = CsvColumns {
            antigen: "ag".into(),
            heavy: "h".into(),
            light: "l".into(),
            kd: "Kd".into(),
        };
        let recs = read_affinity_csv(&path, &cols).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].kd_nm, Some(5.0));
        assert_eq!(recs[1].kd_nm, None);
        assert!(recs[2].kd_nm.unwrap().is_nan());
        assert!(matches!(
            read_affinity_csv(&path, &CsvColumns::default()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn dataset_dir_round_trip() {
        let recs: Vec<AffinityRecord> = (0..20)
            .map(|i| AffinityRecord {
                antigen_seq: format!("MKT{}", "A".repeat(i + 1)),
                heavy_seq: format!("EV{}", "C".repeat(i + 1)),
                light_seq: "DIQ".into(),
                kd_nm: Some(1.0 + i as f64),
            })
            .collect();
        let p = preprocess(recs, &PreprocessConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = Dataset::write(dir.path(), &p).unwrap();
        let opened = Dataset::open(dir.path()).unwrap();
        assert_eq!(written, opened);
        assert_eq!(opened.manifest.sequences, p.sequences);
    }
}
