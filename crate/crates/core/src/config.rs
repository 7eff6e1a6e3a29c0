//! Run configuration shared by every subcommand.
//!
//! One JSON document can describe a whole pipeline run. Values are resolved
//! as flags over file over defaults, and the merged result is written next
//! to each artifact a command produces.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{CsvColumns, PreprocessConfig, SplitName, DEFAULT_FRACTIONS};
use crate::error::{Error, Result};
use crate::metrics::{AucPolicy, Scale};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// File locations; each subcommand's `--out` fills the matching slot.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Raw affinity CSV.
    pub input: Option<PathBuf>,
    /// Preprocessed dataset directory.
    pub dataset: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub curves: Option<PathBuf>,
    /// Evaluation report JSON.
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub columns: CsvColumns,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            fractions: DEFAULT_FRACTIONS,
            columns: CsvColumns::default(),
        }
    }
}

impl DataConfig {
    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            seed: self.seed,
            fractions: self.fractions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    Synthetic,
    Import,
}

impl std::str::FromStr for EmbedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(EmbedMode::Synthetic),
            "import" => Ok(EmbedMode::Import),
            other => Err(Error::Config(format!("unknown embed mode `{other}` (expected synthetic or import)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub mode: EmbedMode,
    pub d_e: usize,
    pub seed: u64,
    /// Source file for `import` mode.
    pub from: Option<PathBuf>,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            mode: EmbedMode::Synthetic,
            d_e: ModelConfig::default().d_e,
            seed: 0,
            from: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: SplitName,
    pub scale: Scale,
    pub auc_policy: AucPolicy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: SplitName::Test,
            scale: Scale::Standardized,
            auc_policy: AucPolicy::Median,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub data: DataConfig,
    pub embed: EmbedConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults, or the given file layered over them. Unknown keys are
    /// rejected.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_json(&text).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Checks every section, whichever command ends up consuming it.
    pub fn validate(&self) -> Result<()> {
        let f = self.data.fractions;
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "data.fractions must be in [0, 1] and sum to 1, got {f:?}"
            )));
        }
        if self.embed.d_e == 0 {
            return Err(Error::Config("embed.d_e must be at least 1".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }

    /// Writes the effective configuration beside `artifact`.
    pub fn echo(&self, artifact: &Path) -> Result<PathBuf> {
        let path = echo_path(artifact);
        fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// `dir/run_config.json` for directories, `file.config.json` otherwise.
pub fn echo_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        return artifact.join("run_config.json");
    }
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    artifact.with_file_name(name)
}

/// The path in `slot`, or a configuration error naming the flag.
pub fn require<'a>(slot: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    slot.as_deref()
        .ok_or_else(|| Error::Config(format!("no {flag} given (flag or config file)")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for doc in [
            r#"{"modle": {}}"#,
            r#"{"model": {"d_model": 3}}"#,
            r#"{"train": {"learning_rate": 0.1}}"#,
            r#"{"paths": {"output": "x"}}"#,
            r#"{"data": {"columns": {"kd_molar": "k"}}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_json(
            r#"{"model": {"d_e": 32, "variant": "esm-c"}, "train": {"lr": 0.01}, "eval": {"auc_policy": "fixed:9.0"}}"#,
        )
        .unwrap();
        assert_eq!(c.model.d_e, 32);
        assert_eq!(c.model.variant, Variant::EsmC);
        assert_eq!(c.model.n_heads, ModelConfig::default().n_heads);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.eval.auc_policy, AucPolicy::Fixed(9.0));
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn validation_covers_all_sections() {
        let mut c = RunConfig::default();
        c.data.fractions = [0.5, 0.5, 0.5];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.train.lr = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.model.n_heads = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn echo_paths() {
        assert_eq!(echo_path(Path::new("/x/model.ckpt")), PathBuf::from("/x/model.ckpt.config.json"));
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(echo_path(dir.path()), dir.path().join("run_config.json"));
    }
}
