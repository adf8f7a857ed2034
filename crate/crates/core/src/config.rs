//! Run configuration: preset defaults, then a JSON file (nested or dotted
//! keys), then command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{GroupingSource, ModelConfig};
use crate::synthdata::DatasetSpec;
use crate::training::{LossWeights, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// d = 32, two layers, a few seconds per epoch on one core.
    #[default]
    Desk,
    /// d = 256, four layers, the published optimizer settings.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Seeds model initialization; `--seed` also sets `data.seed` and `train.seed`.
    pub seed: u64,
    pub data: DatasetSpec,
    pub val_scenes: usize,
    /// Directory holding `train.jsonl` and `val.jsonl`.
    pub data_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    /// Grouping used by `eval` and by the scores written after training.
    pub grouping: GroupingSource,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (d, layers, train) = match preset {
            Preset::Desk => (
                32,
                2,
                TrainConfig {
                    epochs: 30,
                    warmup_epochs: 3,
                    lr: 2e-3,
                    ..TrainConfig::default()
                },
            ),
            Preset::Paper => (256, 4, TrainConfig::default()),
        };
        let data = DatasetSpec {
            d,
            ..DatasetSpec::default()
        };
        let model = ModelConfig {
            d,
            layers,
            heads: 4,
            crop_h: data.crop_h,
            crop_w: data.crop_w,
            frames: data.frames,
            grid_h: data.grid_h,
            grid_w: data.grid_w,
            ..ModelConfig::default()
        };
        Self {
            preset,
            seed: 0,
            data,
            val_scenes: 50,
            data_dir: PathBuf::from("data"),
            model,
            train,
            loss: LossWeights::default(),
            grouping: GroupingSource::Predicted,
            out: PathBuf::from("runs/latest"),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Turns `{"a.b": 1}` into `{"a": {"b": 1}}`, recursively.
pub fn expand_dotted(v: Value) -> Result<Value, ConfigError> {
    let Value::Object(map) = v else {
        return Ok(v);
    };
    let mut out = Value::Object(Map::new());
    for (key, value) in map {
        let value = expand_dotted(value)?;
        let mut path: Vec<&str> = key.split('.').collect();
        let last = path.pop().expect("split yields one part");
        let mut nested = Value::Object(Map::from_iter([(last.to_string(), value)]));
        for part in path.iter().rev() {
            nested = Value::Object(Map::from_iter([(part.to_string(), nested)]));
        }
        merge(&mut out, nested);
    }
    Ok(out)
}

/// Deep merge: objects merge key by key, anything else replaces.
pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a flag or grid value: JSON when it parses, a plain string otherwise.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Resolves preset, file and `(dotted key, value)` overrides into a config.
pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, ConfigError> {
    let file_value = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let v: Value =
                serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
            if !v.is_object() {
                return Err(ConfigError::Invalid(format!(
                    "{}: expected a JSON object",
                    path.display()
                )));
            }
            expand_dotted(v)?
        }
        None => Value::Object(Map::new()),
    };
    let mut overlay = file_value;
    for (key, value) in overrides {
        merge(
            &mut overlay,
            expand_dotted(Value::Object(Map::from_iter([(key.clone(), value.clone())])))?,
        );
    }
    let preset: Preset = match overlay.get("preset") {
        Some(p) => serde_json::from_value(p.clone()).map_err(|e| ConfigError::Invalid(format!("preset: {e}")))?,
        None => Preset::Desk,
    };
    let mut base = serde_json::to_value(RunConfig::preset(preset)).expect("config serializes");
    merge(&mut base, overlay);
    serde_json::from_value(base).map_err(|e| ConfigError::Invalid(e.to_string()))
}
