//! The merged run configuration stored alongside every checkpoint.

use std::fmt;

use crate::config::{ConfigError, KvMap};
use crate::data::SceneConfig;
use crate::nn::NetConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub train_data: Option<String>,
    pub val_data: Option<String>,
}

impl RunConfig {
    /// Parse strictly: every key must belong to one of the sections.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut kv = KvMap::parse(text)?;
        let config = Self::take_from(&mut kv)?;
        kv.finish()?;
        Ok(config)
    }

    pub fn take_from(kv: &mut KvMap) -> Result<Self, ConfigError> {
        let net = NetConfig::take_from(kv)?;
        net.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(RunConfig {
            net,
            train: TrainConfig::take_from(kv)?,
            scene: SceneConfig::take_from(kv)?,
            train_data: kv.take_str("train_data"),
            val_data: kv.take_str("val_data"),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# network\n{}# training\n{}# scenes\n{}",
            self.net.to_text(),
            self.train.to_text(),
            self.scene.to_text()
        );
        for (k, v) in [("train_data", &self.train_data), ("val_data", &self.val_data)] {
            if let Some(v) = v {
                s.push_str(&format!("{k}={v}\n"));
            }
        }
        s
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_strictness() {
        let mut c = RunConfig::default();
        c.train.epochs = 7;
        c.train.clip_norm = Some(2.5);
        c.train_data = Some("data/train".into());
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        let err = RunConfig::parse("epochs=3\nepoch=4\n").unwrap_err();
        assert_eq!(err, ConfigError::Unknown(vec!["epoch".into()]));
    }
}
