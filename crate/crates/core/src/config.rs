//! Experiment configuration files (UTF-8 JSON with a `schema_version`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rnn::{CharLmConfig, DecodeMode};
use crate::seq2seq::Seq2SeqConfig;
use crate::style::StyleConfig;
use crate::text::{load_dataset, read_utf8, WordDataset};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Rnn,
    Seq2seq,
    Styletransfer,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rnn => "rnn",
            ModelKind::Seq2seq => "seq2seq",
            ModelKind::Styletransfer => "styletransfer",
        }
    }
}

/// Input files. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `source<TAB>target` lines.
    pub pairs: Option<PathBuf>,
    pub source_words: Option<PathBuf>,
    pub target_words: Option<PathBuf>,
    /// Target-language dictionary used by `evaluate`.
    pub reference: Option<PathBuf>,
    pub source_language: String,
    pub target_language: String,
    /// Free-form dataset label carried into reports.
    pub dataset_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DecodeConfig {
    Greedy,
    Sample { temperature: f64 },
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig::Greedy
    }
}

impl From<DecodeConfig> for DecodeMode {
    fn from(d: DecodeConfig) -> Self {
        match d {
            DecodeConfig::Greedy => DecodeMode::Greedy,
            DecodeConfig::Sample { temperature } => DecodeMode::Sample { temperature },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u64,
    pub model: ModelKind,
    pub data: DataConfig,
    #[serde(default = "default_holdout")]
    pub holdout: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub rnn: CharLmConfig,
    #[serde(default)]
    pub seq2seq: Seq2SeqConfig,
    #[serde(default)]
    pub style: StyleConfig,
    /// Decoding for the RNN baseline; the other models decode greedily.
    #[serde(default)]
    pub decode: DecodeConfig,
}

fn default_holdout() -> usize {
    100
}

impl ExperimentConfig {
    pub fn new(model: ModelKind, data: DataConfig) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            model,
            data,
            holdout: default_holdout(),
            seed: 0,
            output_dir: None,
            rnn: CharLmConfig::default(),
            seq2seq: Seq2SeqConfig::default(),
            style: StyleConfig::default(),
            decode: DecodeConfig::default(),
        }
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        match value.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(SCHEMA_VERSION) => {}
            Some(found) => {
                return Err(Error::Version {
                    what: "config schema",
                    found,
                    expected: SCHEMA_VERSION,
                })
            }
            None => {
                return Err(Error::Config {
                    path: path.to_path_buf(),
                    msg: "missing integer field `schema_version`".into(),
                })
            }
        }
        serde_json::from_value(value).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Reads a config and resolves its relative data paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&read_utf8(path)?, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [&mut d.pairs, &mut d.source_words, &mut d.target_words, &mut d.reference]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn load_dataset(&self) -> Result<WordDataset> {
        load_dataset(
            self.data.pairs.as_deref(),
            self.data.source_words.as_deref(),
            self.data.target_words.as_deref(),
        )
    }
}
