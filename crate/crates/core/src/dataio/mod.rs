//! Raw affinity records to tokenized, standardized, sequence-disjoint splits.
//!
//! The pipeline is: K_d filter, sequence cleaning, pK_d transform,
//! tokenization (with the heavy and light chains joined by a separator),
//! grouped split, and finally a z-score fitted on the training split only.

mod affinity;
mod sequence;
mod split;
mod store;

pub use affinity::{filter_kd, kd_to_pkd, pkd_to_kd, KdTally, Scaler, KD_MAX_NM, KD_MIN_NM};
pub use sequence::{
    clean_sequence, combine_antibody, detokenize, sequence_id, tokenize, SeqKind, Token,
    AMINO_ACIDS, MAX_LEN, PAD, SEP, SEP_CHAR, UNKNOWN, VOCABULARY, VOCAB_SIZE,
};
pub use split::{group_split, sharing_components, SplitDataset, SplitName, DEFAULT_FRACTIONS};
pub use store::{
    decode_records, encode_records, read_affinity_csv, read_records, write_records, CsvColumns,
    Dataset, Manifest, SequenceEntry, SplitCounts, SplitFiles, VocabEntry, MANIFEST_FILE,
};
pub(crate) use store::Reader;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One measured antigen-antibody pair as read from the input table.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityRecord {
    pub antigen_seq: String,
    pub heavy_seq: String,
    pub light_seq: String,
    /// `None` when the value is missing; NaN when present but unparsable.
    pub kd_nm: Option<f64>,
}

/// A retained record, tokenized and keyed by content-derived sequence ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanRecord {
    pub antigen_id: String,
    pub antibody_id: String,
    pub antigen_tokens: Vec<Token>,
    pub antibody_tokens: Vec<Token>,
    pub pkd: f64,
    pub pkd_std: f64,
}

/// Input rows dropped during preprocessing, by reason.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropTally {
    pub missing_kd: usize,
    pub invalid_kd: usize,
    pub kd_out_of_range: usize,
    pub empty_sequence: usize,
}

impl DropTally {
    pub fn total(&self) -> usize {
        self.missing_kd + self.invalid_kd + self.kd_out_of_range + self.empty_sequence
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub seed: u64,
    pub fractions: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            seed: 0,
            fractions: DEFAULT_FRACTIONS,
        }
    }
}

/// Output of [`preprocess`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedDataset {
    pub split: SplitDataset,
    pub scaler: Scaler,
    /// Every distinct sequence referenced by a retained record, sorted by id.
    pub sequences: Vec<SequenceEntry>,
    pub dropped: DropTally,
    pub input_rows: usize,
}

/// A cleaned and tokenized antigen/antibody pair, without a target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub antigen_id: String,
    pub antibody_id: String,
    pub antigen_tokens: Vec<Token>,
    pub antibody_tokens: Vec<Token>,
}

/// Cleans and tokenizes raw sequences the same way [`preprocess`] does.
pub fn encode_pair(antigen: &str, heavy: &str, light: &str) -> Result<EncodedPair> {
    let antigen_tokens = tokenize(&clean_sequence(antigen)?, MAX_LEN)?;
    let antibody_tokens = combine_antibody(
        &tokenize(&clean_sequence(heavy)?, MAX_LEN)?,
        &tokenize(&clean_sequence(light)?, MAX_LEN)?,
    )?;
    Ok(EncodedPair {
        antigen_id: sequence_id(SeqKind::Antigen, &antigen_tokens),
        antibody_id: sequence_id(SeqKind::Antibody, &antibody_tokens),
        antigen_tokens,
        antibody_tokens,
    })
}

fn clean_record(r: &AffinityRecord) -> Result<CleanRecord> {
    let pair = encode_pair(&r.antigen_seq, &r.heavy_seq, &r.light_seq)?;
    let kd = r
        .kd_nm
        .ok_or_else(|| Error::RecordRejected("missing K_d".into()))?;
    Ok(CleanRecord {
        antigen_id: pair.antigen_id,
        antibody_id: pair.antibody_id,
        antigen_tokens: pair.antigen_tokens,
        antibody_tokens: pair.antibody_tokens,
        pkd: kd_to_pkd(kd)?,
        pkd_std: 0.0,
    })
}

/// Runs the full cleaning, transform and split pipeline.
pub fn preprocess(records: Vec<AffinityRecord>, config: &PreprocessConfig) -> Result<ProcessedDataset> {
    let input_rows = records.len();
    let (kept, kd_tally) = filter_kd(records);
    let mut dropped = DropTally {
        missing_kd: kd_tally.missing,
        invalid_kd: kd_tally.invalid,
        kd_out_of_range: kd_tally.out_of_range,
        empty_sequence: 0,
    };
    let mut clean = Vec::with_capacity(kept.len());
    for r in &kept {
        match clean_record(r) {
            Ok(c) => clean.push(c),
            Err(Error::RecordRejected(_)) => dropped.empty_sequence += 1,
            Err(e) => return Err(e),
        }
    }
    if clean.is_empty() {
        return Err(Error::NoRecordsRetained);
    }

    let mut split = group_split(clean, config.seed, config.fractions)?;
    let train_pkd: Vec<f64> = split.train.iter().map(|r| r.pkd).collect();
    let scaler = Scaler::fit(&train_pkd)?;
    for part in split.parts_mut() {
        for r in part.iter_mut() {
            r.pkd_std = scaler.apply(r.pkd);
        }
    }

    let mut seen = std::collections::BTreeMap::new();
    for part in [&split.train, &split.val, &split.test] {
        for r in part {
            seen.entry(r.antigen_id.clone())
                .or_insert((SeqKind::Antigen, &r.antigen_tokens));
            seen.entry(r.antibody_id.clone())
                .or_insert((SeqKind::Antibody, &r.antibody_tokens));
        }
    }
    let sequences = seen
        .into_iter()
        .map(|(id, (kind, tokens))| {
            Ok(SequenceEntry {
                id,
                kind,
                length: tokens.len(),
                sequence: detokenize(tokens)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ProcessedDataset {
        split,
        scaler,
        sequences,
        dropped,
        input_rows,
    })
}
