use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Token id. `0` is padding; see [`VOCABULARY`].
pub type Token = u8;

pub const PAD: Token = 0;
pub const UNKNOWN: Token = 21;
pub const SEP: Token = 22;

/// Longest token sequence kept per protein.
pub const MAX_LEN: usize = 512;

/// The 20 canonical one-letter amino-acid codes, in alphabetical order.
pub const AMINO_ACIDS: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";

/// Character used for the chain separator when a token sequence is rendered
/// as text.
pub const SEP_CHAR: char = '/';

/// Full token table: `(symbol, id)`.
pub const VOCABULARY: [(&str, Token); 23] = [
    ("<pad>", 0),
    ("A", 1),
    ("C", 2),
    ("D", 3),
    ("E", 4),
    ("F", 5),
    ("G", 6),
    ("H", 7),
    ("I", 8),
    ("K", 9),
    ("L", 10),
    ("M", 11),
    ("N", 12),
    ("P", 13),
    ("Q", 14),
    ("R", 15),
    ("S", 16),
    ("T", 17),
    ("V", 18),
    ("W", 19),
    ("Y", 20),
    ("X", 21),
    ("<sep>", 22),
];

pub const VOCAB_SIZE: usize = VOCABULARY.len();

fn is_canonical(c: u8) -> bool {
    AMINO_ACIDS.contains(&c)
}

/// Strips whitespace, uppercases, and replaces anything outside the 20
/// canonical residues with `X`.
pub fn clean_sequence(raw: &str) -> Result<String> {
    let cleaned: String = raw
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| {
            let up = c.to_ascii_uppercase();
            if up.is_ascii() && is_canonical(up as u8) {
                up
            } else {
                'X'
            }
        })
        .collect();
    if cleaned.is_empty() {
        return Err(Error::RecordRejected("sequence is empty after cleaning".into()));
    }
    Ok(cleaned)
}

fn token_of(c: u8) -> Option<Token> {
    match c {
        b'X' => Some(UNKNOWN),
        _ => AMINO_ACIDS
            .iter()
            .position(|&a| a == c)
            .map(|i| i as Token + 1),
    }
}

/// Maps a cleaned sequence to token ids, keeping at most `max_len` leading
/// residues.
pub fn tokenize(seq: &str, max_len: usize) -> Result<Vec<Token>> {
    seq.bytes()
        .take(max_len)
        .map(|c| {
            token_of(c).ok_or_else(|| {
                Error::Contract(format!("character {:?} is not in the vocabulary", c as char))
            })
        })
        .collect()
}

/// Inverse of [`tokenize`]; the separator renders as [`SEP_CHAR`].
pub fn detokenize(tokens: &[Token]) -> Result<String> {
    tokens
        .iter()
        .map(|&t| match t {
            1..=20 => Ok(AMINO_ACIDS[t as usize - 1] as char),
            UNKNOWN => Ok('X'),
            SEP => Ok(SEP_CHAR),
            _ => Err(Error::Contract(format!("token {t} has no residue"))),
        })
        .collect()
}

/// `heavy ++ [SEP] ++ light`, truncated to [`MAX_LEN`].
pub fn combine_antibody(heavy: &[Token], light: &[Token]) -> Result<Vec<Token>> {
    if heavy.is_empty() || light.is_empty() {
        return Err(Error::RecordRejected(
            "antibody needs both a heavy and a light chain".into(),
        ));
    }
    let mut out = Vec::with_capacity(heavy.len() + light.len() + 1);
    out.extend_from_slice(heavy);
    out.push(SEP);
    out.extend_from_slice(light);
    out.truncate(MAX_LEN);
    Ok(out)
}

/// Which protein a sequence id refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeqKind {
    Antigen,
    Antibody,
}

/// Stable content-derived id for a token sequence, e.g. `ag-1f3a...`.
pub fn sequence_id(kind: SeqKind, tokens: &[Token]) -> String {
    let digest = Sha256::digest(tokens);
    let prefix = match kind {
        SeqKind::Antigen => "ag-",
        SeqKind::Antibody => "ab-",
    };
    let mut id = String::from(prefix);
    for b in digest.iter().take(8) {
        id.push_str(&format!("{b:02x}"));
    }
    id
}
