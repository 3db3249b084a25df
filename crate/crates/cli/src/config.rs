//! Layered settings: command-line flags, then a TOML file, then defaults.

use std::path::Path;

use anyhow::{Context, Result};
use flowdetect::perturb::Scale;
use flowdetect::tokenizer::{Quantization, TokenizerKind, DEFAULT_SUBWORD_VOCAB};
use flowdetect::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "FLOWDETECT_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub train: TrainConfig,
    pub mix: MixSection,
    pub tokenizer: TokenizerSection,
    pub perturb: PerturbSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixSection {
    pub per_source: usize,
    pub test_per_source: usize,
}

impl Default for MixSection {
    fn default() -> Self {
        Self {
            per_source: 100_000,
            test_per_source: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub kind: TokenizerKind,
    /// `raw` or `log-bucket[:N]`.
    pub quantization: String,
    pub subword_vocab: usize,
}

impl TokenizerSection {
    pub fn quantization(&self) -> Result<Quantization> {
        self.quantization
            .parse()
            .map_err(|e| anyhow::anyhow!("tokenizer.quantization = {:?}: {e}", self.quantization))
    }
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            kind: TokenizerKind::Nss,
            quantization: Quantization::Raw.to_string(),
            subword_vocab: DEFAULT_SUBWORD_VOCAB,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSection {
    pub scale: String,
    pub round: bool,
    pub clip_nonnegative: bool,
}

impl Default for PerturbSection {
    fn default() -> Self {
        Self {
            scale: "auto".into(),
            round: true,
            clip_nonnegative: true,
        }
    }
}

impl PerturbSection {
    pub fn scale(&self) -> Result<Scale> {
        self.scale
            .parse()
            .with_context(|| format!("perturb.scale = {:?}", self.scale))
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `--seed`, then the file's `seed`, then `FLOWDETECT_SEED`, then 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
            Err(_) => Ok(0),
        }
    }
}

pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: FileConfig = toml::from_str("seed = 4\n[train]\nbatch_size = 8\n[tokenizer]\nkind = \"subword\"\n").unwrap();
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.max_epochs, TrainConfig::default().max_epochs);
        assert_eq!(cfg.tokenizer.kind, TokenizerKind::Subword);
        assert_eq!(cfg.mix, MixSection::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[train]\nbatchsize = 8\n").is_err());
    }

    #[test]
    fn flag_beats_file() {
        let cfg = FileConfig {
            seed: Some(4),
            ..FileConfig::default()
        };
        assert_eq!(cfg.resolve_seed(Some(9)).unwrap(), 9);
        assert_eq!(cfg.resolve_seed(None).unwrap(), 4);
    }
}
