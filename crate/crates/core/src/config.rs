//! Run configuration: detector, training (with augmentation and loss) and
//! evaluation settings in a single JSON document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::detector::DetectorConfig;
use crate::eigencam::default_layers;
use crate::evalmetrics::EvalOptions;
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub cam_layers: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            detector: DetectorConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            cam_layers: default_layers(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.cam_layers.is_empty() {
            return Err(Error::config("cam_layers", "at least one layer is required"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config { field, detail } => Error::Config { field, detail: format!("{detail} (in {})", path.display()) },
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Sets the field at a dotted path (`train.epochs`) from a JSON literal;
    /// bare words are taken as strings. The result is validated.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::config(key.to_string(), "no such setting"))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::config(key.to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
