//! Run configuration.
//!
//! A single file, TOML or JSON by extension, with optional `synth`, `model`,
//! `train`, `decode` and `metric` sections. Missing keys take their
//! defaults and unknown keys are rejected. Individual values can be
//! overridden with dotted `key=value` pairs such as `train.epochs=5`; the
//! value is read as JSON when it parses and as a string otherwise.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decoder::DecodeConfig;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::metric::MetricConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: HeadConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub metric: MetricConfig,
}

impl RunConfig {
    pub fn from_str_with_format(text: &str, toml_format: bool) -> Result<Self> {
        if toml_format {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
        } else {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
        }
    }

    /// Reads a `.toml` or `.json` file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let toml_format = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => true,
            Some("json") => false,
            _ => return Err(Error::Config(format!("{} is neither .toml nor .json", path.display()))),
        };
        Self::from_str_with_format(&text, toml_format)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(&self)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            }
            *slot = value;
        }
        serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks each section and their agreement.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.pyramid.validate()?;
        self.train.validate()?;
        self.metric.validate()?;
        if self.model.num_classes == 0 {
            return Err(Error::Config("model.num_classes must be positive".into()));
        }
        if self.synth.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "synth.num_classes {} differs from model.num_classes {}",
                self.synth.num_classes, self.model.num_classes
            )));
        }
        let p = &self.model.pyramid;
        if (self.synth.height, self.synth.width) != (p.input_h, p.input_w) {
            return Err(Error::Config(format!(
                "synthetic frames {}x{} do not match model input {}x{}",
                self.synth.height, self.synth.width, p.input_h, p.input_w
            )));
        }
        self.decode.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::Level;

    #[test]
    fn defaults_are_consistent() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_toml_and_unknown_keys() {
        let c = RunConfig::from_str_with_format("[train]\nepochs = 3\n", true).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert!(RunConfig::from_str_with_format("[train]\nepoch = 3\n", true).is_err());
        assert!(RunConfig::from_str_with_format(r#"{"bogus": {}}"#, false).is_err());
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(&["train.rsp=0.5", "decode.levels=[\"x8\"]", "synth.seed=9"])
            .unwrap();
        assert_eq!(c.train.rsp, 0.5);
        assert_eq!(c.decode.levels, vec![Level::X8]);
        assert_eq!(c.synth.seed, 9);
        assert!(RunConfig::default().with_overrides(&["train.nope=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["train.epochs"]).is_err());
        assert!(RunConfig::default().with_overrides(&["train.epochs=abc"]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
