//! Regression and ranking metrics over `f64` slices.

use serde::{Deserialize, Serialize};

use crate::dataio::Scaler;
use crate::error::{Error, Result};

fn check_pair(pred: &[f64], target: &[f64], min: usize, what: &str) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Dimension {
            op: "metric",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    if pred.len() < min {
        return Err(Error::Contract(format!("{what} needs at least {min} values, got {}", pred.len())));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target, 1, "rmse")?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target, 1, "mae")?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// `1 - SS_res / SS_tot`, with `SS_tot` about the target mean.
pub fn r2(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target, 2, "r2")?;
    let m = mean(target);
    let ss_tot: f64 = target.iter().map(|t| (t - m) * (t - m)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("r2 of a constant target".into()));
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2, "pearson")?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("correlation with a constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2, "spearman")?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Area under the ROC curve from rank sums: the probability that a positive
/// outscores a negative, counting ties as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "roc_auc",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// How true pK_d values are turned into binder labels for AUC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AucPolicy {
    /// Threshold at the median of the evaluated values.
    Median,
    Fixed(f64),
}

impl std::fmt::Display for AucPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AucPolicy::Median => f.write_str("median"),
            AucPolicy::Fixed(t) => write!(f, "fixed:{t:?}"),
        }
    }
}

impl std::str::FromStr for AucPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "median" {
            return Ok(AucPolicy::Median);
        }
        if let Some(t) = s.strip_prefix("fixed:") {
            let t: f64 = t
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad AUC threshold in `{s}`")))?;
            if t.is_finite() {
                return Ok(AucPolicy::Fixed(t));
            }
        }
        Err(Error::Config(format!("unknown AUC policy `{s}` (expected median or fixed:<pKd>)")))
    }
}

impl Serialize for AucPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for AucPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn median(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Contract("median of an empty list".into()));
    }
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Labels `pkd >= threshold`; errors when only one class results.
pub fn binarize_targets(pkds: &[f64], policy: AucPolicy) -> Result<(Vec<bool>, f64)> {
    if pkds.len() < 2 {
        return Err(Error::UndefinedMetric("binarization needs at least 2 values".into()));
    }
    let threshold = match policy {
        AucPolicy::Median => median(pkds)?,
        AucPolicy::Fixed(t) => t,
    };
    let labels: Vec<bool> = pkds.iter().map(|&p| p >= threshold).collect();
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::UndefinedMetric(format!(
            "threshold {threshold} puts every value in one class"
        )));
    }
    Ok((labels, threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// z-scored pK_d, the training target.
    Standardized,
    Pkd,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standardized" => Ok(Scale::Standardized),
            "pkd" => Ok(Scale::Pkd),
            other => Err(Error::Config(format!("unknown scale `{other}` (expected standardized or pkd)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub n: usize,
    pub scale: Scale,
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub pearson: f64,
    pub spearman: f64,
    /// `None` when binarization yields a single class.
    pub auc: Option<f64>,
    pub auc_policy: AucPolicy,
    /// pK_d cutoff used for the AUC labels.
    pub auc_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Full metric suite. `pred_std` are standardized-scale predictions and
/// `target_pkd` the true pK_d values; `scale` picks the regression-metric
/// scale. AUC labels always come from the true pK_d values.
pub fn evaluate(pred_std: &[f64], target_pkd: &[f64], scaler: &Scaler, scale: Scale, policy: AucPolicy) -> Result<EvalReport> {
    check_pair(pred_std, target_pkd, 2, "evaluation")?;
    let (pred, target): (Vec<f64>, Vec<f64>) = match scale {
        Scale::Standardized => (pred_std.to_vec(), target_pkd.iter().map(|&t| scaler.apply(t)).collect()),
        Scale::Pkd => (pred_std.iter().map(|&p| scaler.invert(p)).collect(), target_pkd.to_vec()),
    };
    let mut warnings = Vec::new();
    let (auc, auc_threshold) = match binarize_targets(target_pkd, policy) {
        Ok((labels, t)) => (Some(roc_auc(&pred, &labels)?), Some(t)),
        Err(Error::UndefinedMetric(msg)) => {
            warnings.push(format!("auc undefined: {msg}"));
            (None, match policy {
                AucPolicy::Fixed(t) => Some(t),
                AucPolicy::Median => median(target_pkd).ok(),
            })
        }
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        n: pred.len(),
        scale,
        rmse: rmse(&pred, &target)?,
        mae: mae(&pred, &target)?,
        r2: r2(&pred, &target)?,
        pearson: pearson(&pred, &target)?,
        spearman: spearman(&pred, &target)?,
        auc,
        auc_policy: policy,
        auc_threshold,
        split: None,
        variant: None,
        warnings,
    })
}
