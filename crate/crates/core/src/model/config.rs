use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which branches feed the regression head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Transformer and CNN branches in both streams.
    #[serde(rename = "duadeep")]
    DuaDeep,
    /// Transformer branch only.
    #[serde(rename = "esm-t")]
    EsmT,
    /// CNN branch only.
    #[serde(rename = "esm-c")]
    EsmC,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::DuaDeep, Variant::EsmT, Variant::EsmC];

    pub fn uses_transformer(self) -> bool {
        matches!(self, Variant::DuaDeep | Variant::EsmT)
    }

    pub fn uses_cnn(self) -> bool {
        matches!(self, Variant::DuaDeep | Variant::EsmC)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::DuaDeep => "duadeep",
            Variant::EsmT => "esm-t",
            Variant::EsmC => "esm-c",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "duadeep" => Ok(Variant::DuaDeep),
            "esm-t" | "esmt" => Ok(Variant::EsmT),
            "esm-c" | "esmc" => Ok(Variant::EsmC),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected duadeep, esm-t or esm-c)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_e: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Feed-forward width; `None` means `4 * d_e`.
    pub d_ff: Option<usize>,
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub head_dims: Vec<usize>,
    pub variant: Variant,
    pub seed: u64,
    /// Dropout on attention and feed-forward outputs during training.
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_e: 1280,
            n_heads: 8,
            n_layers: 2,
            d_ff: None,
            conv1: ConvSpec {
                filters: 256,
                kernel: 3,
            },
            conv2: ConvSpec {
                filters: 128,
                kernel: 5,
            },
            head_dims: vec![512, 128],
            variant: Variant::DuaDeep,
            seed: 0,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_e == 0 {
            return bad("d_e must be positive".into());
        }
        if self.n_heads == 0 || self.d_e % self.n_heads != 0 {
            return bad(format!(
                "d_e = {} is not divisible by n_heads = {}",
                self.d_e, self.n_heads
            ));
        }
        if self.d_ff == Some(0) {
            return bad("d_ff must be positive".into());
        }
        for (name, c) in [("conv1", self.conv1), ("conv2", self.conv2)] {
            if c.filters == 0 {
                return bad(format!("{name} needs at least one filter"));
            }
            if c.kernel % 2 == 0 {
                return bad(format!("{name} kernel size {} must be odd", c.kernel));
            }
        }
        if self.head_dims.contains(&0) {
            return bad("head hidden widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.ln_eps >= 0.0) || !self.ln_eps.is_finite() {
            return bad(format!("ln_eps {} must be finite and non-negative", self.ln_eps));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_e / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_e)
    }

    /// Pooled CNN feature width.
    pub fn d_cnn(&self) -> usize {
        self.conv2.filters
    }

    /// Per-stream feature width.
    pub fn stream_width(&self) -> usize {
        let t = if self.variant.uses_transformer() { self.d_e } else { 0 };
        let c = if self.variant.uses_cnn() { self.d_cnn() } else { 0 };
        t + c
    }

    /// Length of the fused antigen-antibody vector fed to the head.
    pub fn fusion_width(&self) -> usize {
        2 * self.stream_width()
    }

    /// Reduced configuration for fast tests and smoke runs.
    pub fn tiny(d_e: usize) -> Self {
        ModelConfig {
            d_e,
            n_heads: 2,
            n_layers: 1,
            d_ff: Some(2 * d_e),
            conv1: ConvSpec {
                filters: 16,
                kernel: 3,
            },
            conv2: ConvSpec {
                filters: 8,
                kernel: 5,
            },
            head_dims: vec![16],
            ..ModelConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_widths_at_full_width() {
        let mut c = ModelConfig::default();
        assert_eq!(c.fusion_width(), 2816);
        c.variant = Variant::EsmT;
        assert_eq!(c.fusion_width(), 2560);
        c.variant = Variant::EsmC;
        assert_eq!(c.fusion_width(), 256);
        c.d_e = 32;
        c.n_heads = 2;
        assert_eq!(c.fusion_width(), 256);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = ModelConfig::default();
        c.n_heads = 7;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.conv2.kernel = 4;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            let j = serde_json::to_string(&v).unwrap();
            assert_eq!(j, format!("\"{}\"", v.as_str()));
        }
        assert!("esm-x".parse::<Variant>().is_err());
    }

    #[test]
    fn unknown_json_keys_rejected() {
        let r: std::result::Result<ModelConfig, _> = serde_json::from_str(r#"{"d_e": 16, "heads": 2}"#);
        assert!(r.is_err());
        let c: ModelConfig = serde_json::from_str(r#"{"d_e": 16, "n_heads": 2}"#).unwrap();
        assert_eq!(c.conv1.filters, 256);
    }
}
