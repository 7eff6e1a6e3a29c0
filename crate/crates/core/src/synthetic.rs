//! Random sequence pairs and embeddings for smoke runs and tests.

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{combine_antibody, sequence_id, CleanRecord, Scaler, SeqKind, Token};
use crate::embedding::{synthetic_embed, EmbeddingStore};
use crate::error::Result;

fn residues(rng: &mut ChaCha8Rng, len: usize) -> Vec<Token> {
    (0..len).map(|_| rng.random_range(1..=20u8)).collect()
}

/// `n` independent pairs with residue lengths in `lengths` and pK_d drawn
/// uniformly from `[5, 11)`, standardized over the whole set.
pub fn synthetic_records(n: usize, lengths: std::ops::RangeInclusive<usize>, seed: u64) -> Result<Vec<CleanRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let ag_len = rng.random_range(lengths.clone());
        let antigen_tokens = residues(&mut rng, ag_len);
        let h_len = rng.random_range(lengths.clone()).div_ceil(2).max(1);
        let l_len = rng.random_range(lengths.clone()).div_ceil(2).max(1);
        let heavy = residues(&mut rng, h_len);
        let light = residues(&mut rng, l_len);
        let antibody_tokens = combine_antibody(&heavy, &light)?;
        out.push(CleanRecord {
            antigen_id: sequence_id(SeqKind::Antigen, &antigen_tokens),
            antibody_id: sequence_id(SeqKind::Antibody, &antibody_tokens),
            antigen_tokens,
            antibody_tokens,
            pkd: rng.random_range(5.0..11.0),
            pkd_std: 0.0,
        });
    }
    if n >= 2 {
        let scaler = Scaler::fit(&out.iter().map(|r| r.pkd).collect::<Vec<_>>())?;
        for r in &mut out {
            r.pkd_std = scaler.apply(r.pkd);
        }
    }
    Ok(out)
}

/// Synthetic embeddings for every distinct sequence in `records`, ordered
/// by id.
pub fn synthetic_store(records: &[CleanRecord], d_e: usize, seed: u64) -> Result<EmbeddingStore> {
    let mut seqs: BTreeMap<&str, &[Token]> = BTreeMap::new();
    for r in records {
        seqs.insert(&r.antigen_id, &r.antigen_tokens);
        seqs.insert(&r.antibody_id, &r.antibody_tokens);
    }
    let mats = seqs
        .into_iter()
        .map(|(id, t)| synthetic_embed(id, t, d_e, seed))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingStore::from_records(d_e, mats)
}
