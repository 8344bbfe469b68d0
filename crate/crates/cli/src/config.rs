//! Run configuration: a TOML file layered over defaults, then `--set`
//! overrides, then the dedicated command-line flags.
//!
//! ```toml
//! [encoder]
//! d = 16
//! prompt_depth = 3
//!
//! [train]
//! epochs = 50
//! seed = 1
//!
//! [eval]
//! protocol = "b2n"
//!
//! [paths]
//! manifest = "data/train.json"
//! catalog = "catalogs/pets.json"
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use sap_core::{toy_encoder_config, toy_train_config, EncoderConfig, Protocol, SapError, TrainConfig};

pub const DEFAULT_LLM_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const DEFAULT_LLM_MODEL: &str = "gpt-3.5-turbo";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub llm: LlmConfig,
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Samples kept per class for training; 0 keeps every sample.
    pub k_shots: usize,
    /// Train on the base half of the split only.
    pub base_only: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protocol: Option<Protocol>,
    /// Threads scoring test images; 0 uses every core.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: DEFAULT_LLM_ENDPOINT.into(),
            model: DEFAULT_LLM_MODEL.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// `{"base": [...], "novel": [...]}`; without it the split is positional.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        let train = TrainConfig {
            prompt_depth: encoder.prompt_depth,
            ..TrainConfig::default()
        };
        Self {
            encoder,
            train,
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            llm: LlmConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Toy encoder, seeded synthetic images, and a built-in catalog.
    Toy,
}

impl RunConfig {
    /// Starting point before any file or override is applied.
    pub fn base(preset: Option<Preset>) -> Self {
        match preset {
            None => Self::default(),
            Some(Preset::Toy) => Self {
                encoder: toy_encoder_config(),
                train: toy_train_config(0),
                ..Self::default()
            },
        }
    }

    /// Merges `file` and then each `key=value` override over the preset
    /// defaults. Override values are read as TOML scalars, falling back to a
    /// bare string.
    pub fn load(preset: Option<Preset>, file: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table = Value::try_from(Self::base(preset))
            .context("serializing default config")?
            .as_table()
            .cloned()
            .unwrap_or_default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| SapError::Config(format!("reading config {}: {e}", path.display())))?;
            let parsed: Table = toml::from_str(&text)
                .map_err(|e| SapError::Config(format!("config {}: {e}", path.display())))?;
            merge(&mut table, parsed);
        }
        for item in overrides {
            set_dotted(&mut table, item)?;
        }
        Self::from_table(table)
    }

    fn from_table(table: Table) -> anyhow::Result<Self> {
        let config: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| SapError::Config(e.message().trim().to_string()))?;
        config.encoder.validate()?;
        config.train.validate()?;
        Ok(config)
    }

    /// Applies one `key=value` override to an already merged config.
    pub fn with_override(&self, item: &str) -> anyhow::Result<Self> {
        let mut table = Value::try_from(self)?.as_table().cloned().unwrap_or_default();
        set_dotted(&mut table, item)?;
        Self::from_table(table)
    }

    /// SHA-256 of the config as JSON with every object's keys sorted.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut canonical = String::new();
        write_canonical(&value, &mut canonical);
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn write_canonical(value: &serde_json::Value, out: &mut String) {
    match value {
        serde_json::Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::Value::String(key.clone()).to_string());
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
        serde_json::Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

fn merge(into: &mut Table, from: Table) {
    for (key, value) in from {
        match (into.get_mut(&key), value) {
            (Some(Value::Table(a)), Value::Table(b)) => merge(a, b),
            (_, value) => {
                into.insert(key, value);
            }
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn set_dotted(table: &mut Table, item: &str) -> anyhow::Result<()> {
    let Some((key, raw)) = item.split_once('=') else {
        bail!(SapError::Config(format!("override `{item}` is not of the form key=value")));
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(SapError::Config(format!("override `{item}` has an empty key segment")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cursor = table;
    for part in parents {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = match entry {
            Value::Table(t) => t,
            _ => bail!(SapError::Config(format!("override `{item}`: `{part}` is not a section"))),
        };
    }
    cursor.insert(last.to_string(), parse_scalar(raw.trim()));
    Ok(())
}
