use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::RuntimeError;

/// Environment variable overriding `rng_seed`.
pub const SEED_ENV: &str = "PARTISAN_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Random,
    ProfileGuided,
    ExpectedCost,
    Fuzzing,
    Custom,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::ProfileGuided => "profile_guided",
            PolicyKind::ExpectedCost => "expected_cost",
            PolicyKind::Fuzzing => "fuzzing",
            PolicyKind::Custom => "custom",
        }
    }

    pub fn needs_profile(self) -> bool {
        matches!(self, PolicyKind::ProfileGuided | PolicyKind::ExpectedCost)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = RuntimeError;
    fn from_str(s: &str) -> Result<Self, RuntimeError> {
        Ok(match s.replace('-', "_").as_str() {
            "random" => PolicyKind::Random,
            "profile_guided" => PolicyKind::ProfileGuided,
            "expected_cost" => PolicyKind::ExpectedCost,
            "fuzzing" => PolicyKind::Fuzzing,
            "custom" => PolicyKind::Custom,
            _ => return Err(RuntimeError::Config(format!("unknown policy `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub policy: PolicyKind,
    pub budget_fraction: f64,
    pub wake_interval_ms: u64,
    pub rng_seed: Option<u64>,
    /// Run partitioning rounds on a background thread after init.
    pub background: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            policy: PolicyKind::Random,
            budget_fraction: 0.01,
            wake_interval_ms: 10,
            rng_seed: None,
            background: true,
        }
    }
}

impl PolicyConfig {
    pub fn with_policy(policy: PolicyKind) -> Self {
        PolicyConfig { policy, ..Default::default() }
    }

    pub fn wake_interval(&self) -> Duration {
        Duration::from_millis(self.wake_interval_ms)
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.policy == PolicyKind::ExpectedCost && !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(RuntimeError::Config(format!(
                "budget_fraction must be in (0, 1], got {}",
                self.budget_fraction
            )));
        }
        if self.wake_interval_ms == 0 {
            return Err(RuntimeError::Config("wake_interval_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, RuntimeError> {
        let c: PolicyConfig = toml::from_str(text).map_err(|e| RuntimeError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, RuntimeError> {
        let text = std::fs::read_to_string(path).map_err(|e| RuntimeError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies the seed environment override, if set.
    pub fn apply_env(&mut self) -> Result<(), RuntimeError> {
        self.apply_seed_var(std::env::var(SEED_ENV).ok().as_deref())
    }

    pub fn apply_seed_var(&mut self, value: Option<&str>) -> Result<(), RuntimeError> {
        if let Some(v) = value {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| RuntimeError::Config(format!("{SEED_ENV}={v} is not a 64-bit integer")))?;
            self.rng_seed = Some(seed);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_validation() {
        let c = PolicyConfig::from_toml("policy = \"expected_cost\"\nbudget_fraction = 0.05\nrng_seed = 7\n").unwrap();
        assert_eq!(c.policy, PolicyKind::ExpectedCost);
        assert_eq!(c.budget_fraction, 0.05);
        assert_eq!(c.rng_seed, Some(7));
        assert_eq!(c.wake_interval_ms, 10);
        assert!(PolicyConfig::from_toml("policy = \"expected_cost\"\nbudget_fraction = 0.0").is_err());
        assert!(PolicyConfig::from_toml("wake_interval_ms = 0").is_err());
        assert!(PolicyConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn seed_override() {
        let mut c = PolicyConfig::default();
        c.apply_seed_var(Some("42")).unwrap();
        assert_eq!(c.rng_seed, Some(42));
        assert!(c.apply_seed_var(Some("x")).is_err());
        c.apply_seed_var(None).unwrap();
        assert_eq!(c.rng_seed, Some(42));
    }
}
