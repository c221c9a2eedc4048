//! Run configuration loaded from TOML.
//!
//! ```toml
//! [data]
//! train = "train.jsonl"
//! valid = "valid.jsonl"
//! test = "test.jsonl"
//! out = "runs/demo"
//!
//! [model]
//! d_model = 64
//! lambda = 0.1
//!
//! [train]
//! epochs = 30
//! seed = 7
//! ```
//!
//! A `[synthetic]` table generates the corpus instead of reading `[data]`
//! paths. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_jsonl, Corpus, JsonlFile, RawSample, Split};
use crate::error::{Error, Result};
use crate::model::ModelSettings;
use crate::synthetic::SyntheticSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawSplits {
    pub train: Vec<RawSample>,
    pub valid: Vec<RawSample>,
    pub test: Vec<RawSample>,
    pub duplicate_labels: usize,
}

impl RawSplits {
    pub fn split(&self, split: Split) -> &[RawSample] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataPaths,
    pub model: ModelSettings,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            for p in [
                &mut cfg.data.train,
                &mut cfg.data.valid,
                &mut cfg.data.test,
                &mut cfg.data.out,
            ] {
                if let Some(rel) = p.as_mut().filter(|p| p.is_relative()) {
                    *rel = dir.join(&*rel);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        match &self.synthetic {
            Some(spec) => spec.validate(),
            None if self.data.train.is_none() => Err(Error::Config(
                "either [data] train path or a [synthetic] table is required".into(),
            )),
            None => Ok(()),
        }
    }

    /// The fully resolved config as TOML, written beside every run's outputs.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Raw train/valid/test samples, either generated or read from disk.
    /// Missing valid/test paths give empty splits.
    pub fn raw_splits(&self) -> Result<RawSplits> {
        if let Some(spec) = &self.synthetic {
            let c = spec.generate()?;
            return Ok(RawSplits {
                train: c.train,
                valid: c.valid,
                test: c.test,
                duplicate_labels: 0,
            });
        }
        let train = self
            .data
            .train
            .as_deref()
            .ok_or_else(|| Error::Config("missing [data] train path".into()))?;
        let read = |p: Option<&Path>| -> Result<JsonlFile> {
            p.map_or_else(|| Ok(JsonlFile::default()), load_jsonl)
        };
        let tr = read(Some(train))?;
        let va = read(self.data.valid.as_deref())?;
        let te = read(self.data.test.as_deref())?;
        Ok(RawSplits {
            duplicate_labels: tr.duplicate_labels + va.duplicate_labels + te.duplicate_labels,
            train: tr.samples,
            valid: va.samples,
            test: te.samples,
        })
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let raw = self.raw_splits()?;
        let mut corpus = Corpus::from_raw(&raw.train, &raw.valid, &raw.test)?;
        corpus.stats.duplicate_labels += raw.duplicate_labels;
        Ok(corpus)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.data
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from("ldspn-out"))
    }
}
