//! Run configuration: TOML file merged over defaults, then command-line overrides.

use std::path::Path;

use crossgan_nn::OptimizerKind;
use serde::{Deserialize, Serialize};

use crate::detection::DetectionMode;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::training::{ModelConfig, TrainConfig};

/// Where optical flow comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowSource {
    /// Solved from consecutive frames.
    #[default]
    Computed,
    /// Read from `.flo` files next to the frames.
    Precomputed,
}

impl std::str::FromStr for FlowSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "computed" => Ok(Self::Computed),
            "precomputed" => Ok(Self::Precomputed),
            _ => Err(Error::config(format!("flow_source: unknown value {s:?} (use computed or precomputed)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    pub mode: DetectionMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Side of the square frames every network sees.
    pub resolution: usize,
    pub flow_source: FlowSource,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub detection: DetectionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            flow_source: FlowSource::default(),
            flow: FlowConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            detection: DetectionConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub resolution: Option<usize>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub l1_weight: Option<f64>,
    pub seed: Option<u64>,
    pub filters: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
    pub flow_source: Option<FlowSource>,
    pub mode: Option<DetectionMode>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Defaults, then the optional file, then the overrides; validated.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.resolution {
            self.resolution = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.learning_rate {
            self.train.learning_rate = v;
        }
        if let Some(v) = o.l1_weight {
            self.train.l1_weight = v;
        }
        if let Some(v) = o.seed {
            self.train.seed = v;
        }
        if let Some(v) = o.filters {
            self.model.generator_filters = v;
            self.model.discriminator_filters = v;
        }
        if let Some(v) = o.optimizer {
            self.train.optimizer = v;
        }
        if let Some(v) = o.flow_source {
            self.flow_source = v;
        }
        if let Some(v) = o.mode {
            self.detection.mode = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.train.validate()?;
        let prefixed = |key: &'static str| move |e: Error| match e {
            Error::Config(m) | Error::Input(m) => Error::config(format!("{key}: {m}")),
            other => other,
        };
        self.model.generator(self.resolution).map_err(prefixed("resolution"))?;
        self.model.discriminator(self.resolution).map_err(prefixed("resolution"))?;
        if self.model.generator_filters == 0 {
            return Err(Error::config("model.generator_filters: must be at least 1"));
        }
        if self.model.discriminator_filters == 0 {
            return Err(Error::config("model.discriminator_filters: must be at least 1"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}
