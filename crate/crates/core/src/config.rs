//! Run configuration file (TOML). Every field has a default, so an empty
//! file is valid. Unknown keys are all reported at once.

use serde::{Deserialize, Serialize};

use crate::bridge::BridgeConfig;
use crate::error::{AcmtError, Result};
use crate::net::NetworkConfig;
use crate::objectives::LossWeights;
use crate::phantom::PhantomConfig;
use crate::registration::RegistrationConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            augment: t.augment,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslateSection {
    pub nfe: usize,
    pub stochastic: bool,
}

impl Default for TranslateSection {
    fn default() -> Self {
        TranslateSection {
            nfe: 5,
            stochastic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: String,
    pub checkpoint: String,
    pub out: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: "data".into(),
            checkpoint: "checkpoint".into(),
            out: "out".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every subsystem derives its own stream from it.
    pub seed: u64,
    pub bridge: BridgeConfig,
    pub network: NetworkConfig,
    pub weights: LossWeights,
    pub train: TrainSection,
    pub translate: TranslateSection,
    pub registration: RegistrationConfig,
    pub phantom: PhantomConfig,
    pub paths: PathsConfig,
}

/// Dotted paths of keys in `user` that do not exist in `reference`.
fn unknown_keys(user: &toml::Value, reference: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    let (toml::Value::Table(u), toml::Value::Table(r)) = (user, reference) else {
        return;
    };
    for (k, v) in u {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match r.get(k) {
            None => out.push(path),
            Some(rv) => unknown_keys(v, rv, &path, out),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Value = toml::from_str(text).map_err(|e| AcmtError::Config(format!("invalid TOML: {e}")))?;
        let reference = toml::Value::try_from(RunConfig::default()).expect("default config serializes");
        let mut unknown = Vec::new();
        unknown_keys(&user, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(AcmtError::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let cfg: RunConfig = user.try_into().map_err(|e: toml::de::Error| AcmtError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.registration.validate()?;
        if self.translate.nfe == 0 || self.translate.nfe > self.bridge.pool_len() + 1 {
            return Err(AcmtError::Config(format!(
                "translate.nfe must be in 1..={}",
                self.bridge.pool_len() + 1
            )));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed: self.seed,
            bridge: self.bridge.clone(),
            weights: self.weights.clone(),
            network: self.network.clone(),
            augment: self.train.augment,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_override() {
        let c = RunConfig::from_toml_str("seed = 4\n[weights]\nlambda_boundary = 0.0\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.weights.lambda_boundary, 0.0);
        assert_eq!(c.weights.lambda_texture, 1.0);
    }

    #[test]
    fn all_unknown_keys_are_listed() {
        let err = RunConfig::from_toml_str("colour = 1\n[bridge]\nsigmaa = 0.1\n[extra]\nx = 1\n")
            .unwrap_err()
            .to_string();
        for k in ["colour", "bridge.sigmaa", "extra"] {
            assert!(err.contains(k), "{err}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml_str("[train]\nepochs = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[bridge]\nsigma = -1.0\n").is_err());
        assert!(RunConfig::from_toml_str("[weights]\nlambda_texture = 0.0\nlambda_boundary = 0.0\nlambda_sb = 0.0\n").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }
}
