//! All stage settings in one document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::DetectorConfig;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::modularize::ModularizerConfig;
use crate::similarity::ChannelWeights;
use crate::volume::PropagationConfig;

/// Merged settings of every stage. Missing sections and fields take their
/// defaults, so an empty document `{}` is a valid configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub propagation: PropagationConfig,
    pub modularizer: ModularizerConfig,
    pub features: FeatureConfig,
    pub weights: ChannelWeights,
    pub detector: DetectorConfig,
}

impl GlobalConfig {
    pub fn validate(&self) -> Result<()> {
        self.propagation.validate()?;
        self.modularizer.validate()?;
        self.features.validate()?;
        self.weights.validate()?;
        self.detector.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: GlobalConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_documents_fill_defaults() {
        let c = GlobalConfig::from_json("{}").unwrap();
        assert_eq!(c, GlobalConfig::default());
        let c = GlobalConfig::from_json(r#"{"detector": {"tau_match": 0.8}}"#).unwrap();
        assert_eq!(c.detector.tau_match, 0.8);
        assert_eq!(c.detector.delta, DetectorConfig::default().delta);
        assert_eq!(c.features, FeatureConfig::default());
    }

    #[test]
    fn round_trip_and_rejections() {
        let c = GlobalConfig::default();
        assert_eq!(GlobalConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(GlobalConfig::from_json(r#"{"detectr": {}}"#).is_err());
        assert!(GlobalConfig::from_json(r#"{"propagation": {"c": -1}}"#).is_err());
        assert!(GlobalConfig::from_json(r#"{"weights": {"strings": 0.9}}"#).is_err());
    }
}
