//! Run configuration: a flat JSON object whose keys are the training
//! hyperparameters plus the environment selection.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nfdrl_core::agent::TrainConfig;
use nfdrl_core::envs::{self, TabularMdp};
use serde_json::{Map, Value};

/// Keys that select and shape the environment rather than the agent.
pub const ENV_KEYS: [&str; 4] = ["env", "env_rewards", "env_component_std", "env_slippery"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvId {
    Mdp1,
    Mdp2,
    Mdp3,
    Bernoulli,
    FrozenLake,
}

impl EnvId {
    pub fn name(self) -> &'static str {
        match self {
            EnvId::Mdp1 => "mdp1",
            EnvId::Mdp2 => "mdp2",
            EnvId::Mdp3 => "mdp3",
            EnvId::Bernoulli => "bernoulli",
            EnvId::FrozenLake => "frozenlake",
        }
    }
}

impl FromStr for EnvId {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mdp1" => Ok(EnvId::Mdp1),
            "mdp2" => Ok(EnvId::Mdp2),
            "mdp3" => Ok(EnvId::Mdp3),
            "bernoulli" => Ok(EnvId::Bernoulli),
            "frozenlake" => Ok(EnvId::FrozenLake),
            other => Err(ConfigError::new("env", format!("unknown environment `{other}`"))),
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A configuration problem attributed to one key.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("config field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Agent hyperparameters plus the environment they are trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub env: EnvId,
    /// The two terminal reward means of mdp1 / mdp2; `None` keeps the
    /// built-in values.
    pub env_rewards: Option<[f64; 2]>,
    /// Component standard deviation of the mdp3 final reward.
    pub env_component_std: f64,
    pub env_slippery: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            env: EnvId::Mdp1,
            env_rewards: None,
            env_component_std: 1.0,
            env_slippery: true,
        }
    }
}

impl RunConfig {
    /// Build from a flat JSON object. Missing keys keep their defaults.
    pub fn from_map(map: &Map<String, Value>) -> Result<Self, ConfigError> {
        let mut out = RunConfig::default();
        let mut train = serde_json::to_value(&out.train).expect("config serializes");
        let train_map = train.as_object_mut().expect("config is an object");
        for (key, value) in map {
            match key.as_str() {
                "env" => {
                    let name = value
                        .as_str()
                        .ok_or_else(|| ConfigError::new("env", "expected a string"))?;
                    out.env = name.parse()?;
                }
                "env_rewards" => {
                    out.env_rewards = if value.is_null() {
                        None
                    } else {
                        Some(serde_json::from_value(value.clone()).map_err(|e| ConfigError::new(key, e.to_string()))?)
                    };
                }
                "env_component_std" => {
                    out.env_component_std = value
                        .as_f64()
                        .ok_or_else(|| ConfigError::new(key, "expected a number"))?;
                }
                "env_slippery" => {
                    out.env_slippery = value
                        .as_bool()
                        .ok_or_else(|| ConfigError::new(key, "expected a boolean"))?;
                }
                _ => {
                    if !train_map.contains_key(key) {
                        return Err(ConfigError::new(key, "unknown field"));
                    }
                    // Deserialize the key on its own so a type error names it.
                    let single = Map::from_iter([(key.clone(), value.clone())]);
                    serde_json::from_value::<TrainConfig>(Value::Object(single))
                        .map_err(|e| ConfigError::new(key, e.to_string()))?;
                    train_map.insert(key.clone(), value.clone());
                }
            }
        }
        out.train = serde_json::from_value(train).map_err(|e| ConfigError::new("config", e.to_string()))?;
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Err(nfdrl_core::Error::Config { field, reason }) = self.train.validate() {
            return Err(ConfigError::new(field, reason));
        }
        self.build_mdp().map(|_| ())
    }

    /// Flat JSON object that [`RunConfig::from_map`] reads back unchanged.
    pub fn to_map(&self) -> Map<String, Value> {
        let mut map = match serde_json::to_value(&self.train).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("config is an object"),
        };
        map.insert("env".into(), Value::from(self.env.name()));
        map.insert(
            "env_rewards".into(),
            serde_json::to_value(self.env_rewards).expect("serializes"),
        );
        map.insert("env_component_std".into(), Value::from(self.env_component_std));
        map.insert("env_slippery".into(), Value::from(self.env_slippery));
        map
    }

    /// The environment described by this config. Terminal rewards of mdp1 and
    /// mdp2 use `final_reward_variance` as their standard deviation.
    pub fn build_mdp(&self) -> Result<TabularMdp, ConfigError> {
        let std = self.train.final_reward_variance;
        let wrap =
            |field: &str, r: nfdrl_core::Result<TabularMdp>| r.map_err(|e| ConfigError::new(field, e.to_string()));
        match self.env {
            EnvId::Mdp1 => {
                let [a, b] = self.env_rewards.unwrap_or([-0.8, 0.3]);
                wrap("env_rewards", envs::make_mdp1_with(a, b, std))
            }
            EnvId::Mdp2 => {
                let [a, b] = self.env_rewards.unwrap_or([0.8, 0.3]);
                wrap("env_rewards", envs::make_mdp2_with(a, b, std))
            }
            EnvId::Mdp3 => wrap("env_component_std", envs::make_mdp3_with(self.env_component_std)),
            EnvId::Bernoulli => Ok(envs::make_bernoulli_mdp()),
            EnvId::FrozenLake => Ok(envs::make_frozen_lake(self.env_slippery)),
        }
    }
}

/// Every key a config file or override may set.
pub fn known_keys() -> Vec<String> {
    let mut keys: Vec<String> = RunConfig::default().to_map().keys().cloned().collect();
    keys.sort();
    keys
}

/// Parse an override value: JSON if it parses, otherwise a bare string.
pub fn parse_override(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

/// Load `path` (if any), apply `overrides` in order, and validate.
pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, ConfigError> {
    let mut map = match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| ConfigError::new("config", format!("{}: {e}", p.display())))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(ConfigError::new("config", "expected a JSON object")),
                Err(e) => return Err(ConfigError::new("config", e.to_string())),
            }
        }
        None => Map::new(),
    };
    for (key, value) in overrides {
        map.insert(key.clone(), value.clone());
    }
    RunConfig::from_map(&map)
}
