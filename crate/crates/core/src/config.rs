//! Run configuration: one TOML document covering model, training, loss,
//! paths and mosaic layout. Unknown keys are rejected.
//!
//! Every leaf key `section.name` can also be set from the command line as
//! `--section-name <value>`, where the value is parsed as a TOML literal.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossSpec;
use crate::model::ModelConfig;
use crate::mosaic::MosaicLayout;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory with `manifest.json`.
    pub dataset: String,
    /// Directory receiving checkpoints and logs.
    pub out: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutConfig {
    /// Optional 4x4 layout table file; empty selects the built-in layout.
    pub file: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossSpec,
    pub paths: Paths,
    pub layout: LayoutConfig,
}

fn to_config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(to_config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(to_config_err)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    pub fn layout(&self) -> Result<MosaicLayout> {
        if self.layout.file.is_empty() {
            return Ok(MosaicLayout::default());
        }
        let text = fs::read_to_string(&self.layout.file).map_err(|e| Error::io(&self.layout.file, e))?;
        MosaicLayout::parse(&text)
    }

    /// Dotted paths of every leaf key, in document order.
    pub fn keys() -> Vec<String> {
        let value = toml::Value::try_from(RunConfig::default()).expect("default config serializes");
        let mut keys = Vec::new();
        if let toml::Value::Table(sections) = value {
            for (section, body) in sections {
                if let toml::Value::Table(leaves) = body {
                    keys.extend(leaves.keys().map(|k| format!("{section}.{k}")));
                }
            }
        }
        keys
    }

    /// Command-line flag for a dotted key: `train.crop_lr` -> `train-crop-lr`.
    pub fn flag_for_key(key: &str) -> String {
        key.replace(['.', '_'], "-")
    }

    /// Apply `key = value` overrides, `value` being a TOML literal (bare
    /// words are taken as strings).
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(to_config_err)?;
        let known = Self::keys();
        for (key, raw) in overrides {
            if !known.iter().any(|k| k == key) {
                return Err(Error::Config(format!("unknown config key {key}")));
            }
            let (section, leaf) = key.split_once('.').expect("keys are dotted");
            let value = parse_literal(raw);
            doc.get_mut(section)
                .and_then(|s| s.as_table_mut())
                .ok_or_else(|| Error::Config(format!("missing section {section}")))?
                .insert(leaf.to_string(), value);
        }
        let cfg: RunConfig = doc.try_into().map_err(to_config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {raw}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
