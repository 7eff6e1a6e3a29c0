use serde::{Deserialize, Serialize};

use super::AffinityRecord;
use crate::error::{Error, Result};

/// Exclusive bounds of the retained K_d range, in nanomolar.
pub const KD_MIN_NM: f64 = 1e-3;
pub const KD_MAX_NM: f64 = 1e9;

/// `9 - log10(kd_nm)`.
pub fn kd_to_pkd(kd_nm: f64) -> Result<f64> {
    if !(kd_nm > 0.0) || !kd_nm.is_finite() {
        return Err(Error::Domain(format!("K_d must be positive and finite, got {kd_nm}")));
    }
    Ok(9.0 - kd_nm.log10())
}

/// Inverse of [`kd_to_pkd`].
pub fn pkd_to_kd(pkd: f64) -> f64 {
    10f64.powf(9.0 - pkd)
}

/// Records dropped by [`filter_kd`], by reason.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KdTally {
    pub missing: usize,
    pub invalid: usize,
    pub out_of_range: usize,
}

/// Keeps records whose K_d is present, finite and strictly inside
/// `(1e-3, 1e9)` nM.
pub fn filter_kd(records: Vec<AffinityRecord>) -> (Vec<AffinityRecord>, KdTally) {
    let mut tally = KdTally::default();
    let kept = records
        .into_iter()
        .filter(|r| match r.kd_nm {
            None => {
                tally.missing += 1;
                false
            }
            Some(kd) if !kd.is_finite() => {
                tally.invalid += 1;
                false
            }
            Some(kd) if kd > KD_MIN_NM && kd < KD_MAX_NM => true,
            Some(_) => {
                tally.out_of_range += 1;
                false
            }
        })
        .collect();
    (kept, tally)
}

/// z-score transform fitted on training targets (population std).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::DegenerateScaler);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::DegenerateScaler);
        }
        Ok(Scaler { mean, std })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}
