//! `--set key=value` overrides applied to serde-backed configs.

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Which config an override addresses, by key prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Ppo,
    Smooth,
    Dqn,
    Astar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub target: Target,
    /// Dotted path inside the target config.
    pub path: String,
    pub value: Value,
}

impl Override {
    /// Parses `key=value`. The value is read as JSON when possible and as a
    /// plain string otherwise, so `scheme=none` and `hidden=[32,32]` both work.
    pub fn parse(text: &str) -> Result<Self> {
        let (key, raw) = text
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{text}` is not of the form key=value"))?;
        let key = key.trim();
        if key.is_empty() {
            bail!("override `{text}` has an empty key");
        }
        let (target, path) = match key.split_once('.') {
            Some(("ppo", rest)) => (Target::Ppo, rest),
            Some(("smooth", rest)) => (Target::Smooth, rest),
            Some(("dqn", rest)) => (Target::Dqn, rest),
            Some(("astar", rest)) => (Target::Astar, rest),
            _ => (Target::Ppo, key),
        };
        let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        Ok(Override {
            target,
            path: path.to_string(),
            value,
        })
    }

    pub fn key(&self) -> String {
        let prefix = match self.target {
            Target::Ppo => "",
            Target::Smooth => "smooth.",
            Target::Dqn => "dqn.",
            Target::Astar => "astar.",
        };
        format!("{prefix}{}", self.path)
    }
}

/// Applies every override aimed at `target` to `base`. Unknown keys are
/// rejected rather than silently ignored.
pub fn apply<T: Serialize + DeserializeOwned>(base: &T, overrides: &[Override], target: Target) -> Result<T> {
    let mut doc = serde_json::to_value(base)?;
    for o in overrides.iter().filter(|o| o.target == target) {
        let mut node = &mut doc;
        let parts: Vec<&str> = o.path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| anyhow!("`{}`: `{part}` is not inside an object", o.key()))?;
            let slot = obj.get_mut(*part).ok_or_else(|| anyhow!("unknown config key `{}`", o.key()))?;
            if i + 1 == parts.len() {
                *slot = o.value.clone();
            }
            node = slot;
        }
    }
    serde_json::from_value(doc).with_context(|| "invalid value in --set override")
}

#[cfg(test)]
mod tests {
    use super::*;
    use harvest_core::ppo::{PpoConfig, RewardScheme};
    use harvest_core::smooth::SmoothConfig;

    #[test]
    fn routes_by_prefix() {
        let o = Override::parse("smooth.epsilon=0.1").unwrap();
        assert_eq!(o.target, Target::Smooth);
        assert_eq!(o.key(), "smooth.epsilon");
        assert_eq!(Override::parse("gamma=0.9").unwrap().target, Target::Ppo);
    }

    #[test]
    fn applies_typed_and_string_values() {
        let sets = [
            Override::parse("scheme=none").unwrap(),
            Override::parse("hidden=[8,8]").unwrap(),
            Override::parse("smooth.epsilon=0.1").unwrap(),
        ];
        let cfg = apply(&PpoConfig::default(), &sets, Target::Ppo).unwrap();
        assert_eq!(cfg.scheme, RewardScheme::None);
        assert_eq!(cfg.hidden, vec![8, 8]);
        let smooth = apply(&SmoothConfig::default(), &sets, Target::Smooth).unwrap();
        assert_eq!(smooth.epsilon, 0.1);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let typo = [Override::parse("gamm=0.9").unwrap()];
        assert!(apply(&PpoConfig::default(), &typo, Target::Ppo).is_err());
        let bad = [Override::parse("epochs=many").unwrap()];
        assert!(apply(&PpoConfig::default(), &bad, Target::Ppo).is_err());
        assert!(Override::parse("novalue").is_err());
    }
}
