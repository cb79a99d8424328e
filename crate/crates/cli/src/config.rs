//! Layered configuration: defaults, then the TOML file, then the seed
//! environment variable, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Deserialize;

use varsan::runtime::{PolicyConfig, PolicyKind};
use varsan::sanitize::CheckConfig;
use varsan::variants::BuildMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sanitizer {
    Address,
    Ub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "kebab-case")]
pub enum Mode {
    Partition,
    Fuzz,
    FuzzBaseline,
    Identical,
}

impl From<Mode> for BuildMode {
    fn from(m: Mode) -> BuildMode {
        match m {
            Mode::Partition => BuildMode::Partition,
            Mode::Fuzz => BuildMode::Fuzz,
            Mode::FuzzBaseline => BuildMode::FuzzBaseline,
            Mode::Identical => BuildMode::Identical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "kebab-case")]
pub enum PolicyArg {
    Random,
    ProfileGuided,
    ExpectedCost,
    Fuzzing,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> PolicyKind {
        match p {
            PolicyArg::Random => PolicyKind::Random,
            PolicyArg::ProfileGuided => PolicyKind::ProfileGuided,
            PolicyArg::ExpectedCost => PolicyKind::ExpectedCost,
            PolicyArg::Fuzzing => PolicyKind::Fuzzing,
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub sanitizers: Option<Vec<Sanitizer>>,
    pub ub_recovery: Option<bool>,
    pub hot_threshold: Option<u64>,
    pub profile: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub output: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub runtime: Option<PolicyConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Debug, Clone, Args)]
pub struct RuntimeFlags {
    /// TOML configuration file; flags and the seed variable override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    /// Sanitization budget as a fraction of baseline cost (expected-cost policy).
    #[arg(long)]
    pub budget: Option<f64>,
    /// Partitioning RNG seed. Overrides the seed environment variable.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub wake_interval_ms: Option<u64>,
}

impl RuntimeFlags {
    /// Resolves the policy config from defaults, file, environment and flags.
    pub fn resolve(&self, file: &FileConfig) -> Result<PolicyConfig> {
        let mut cfg = file.runtime.clone().unwrap_or_default();
        cfg.apply_env()?;
        if let Some(p) = self.policy {
            cfg.policy = p.into();
        }
        if let Some(b) = self.budget {
            cfg.budget_fraction = b;
        }
        if let Some(s) = self.seed {
            cfg.rng_seed = Some(s);
        }
        if let Some(w) = self.wake_interval_ms {
            cfg.wake_interval_ms = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct CheckFlags {
    /// Checks to insert into sanitized variants.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub sanitizers: Option<Vec<Sanitizer>>,
}

impl CheckFlags {
    pub fn resolve(&self, file: &FileConfig) -> Result<CheckConfig> {
        let set = self.sanitizers.clone().or_else(|| file.sanitizers.clone()).unwrap_or(vec![Sanitizer::Address]);
        if set.is_empty() {
            bail!("at least one sanitizer must be enabled");
        }
        Ok(CheckConfig {
            enable_address: set.contains(&Sanitizer::Address),
            enable_ub: set.contains(&Sanitizer::Ub),
            ub_recovery: file.ub_recovery.unwrap_or(false),
        })
    }
}

/// Fully resolved settings for `build`.
#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub checks: CheckConfig,
    pub policy: PolicyConfig,
    pub hot_threshold: u64,
    pub profile: Option<PathBuf>,
    pub mode: BuildMode,
    pub output: PathBuf,
    pub metadata: PathBuf,
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.policy.policy.needs_profile() && self.profile.is_none() {
            bail!("policy {} needs profile data: pass --profile <profile.json>", self.policy.policy);
        }
        if self.policy.policy == PolicyKind::Fuzzing && self.mode != BuildMode::Fuzz {
            bail!("policy fuzzing needs a fuzz build: pass --mode fuzz");
        }
        Ok(())
    }
}

/// `prog.pir` -> `prog.meta.json`.
pub fn metadata_path_for(program: &Path) -> PathBuf {
    let stem = program.file_stem().and_then(|s| s.to_str()).unwrap_or("program");
    program.with_file_name(format!("{stem}.meta.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file() {
        let file: FileConfig = toml::from_str(
            "sanitizers = [\"address\", \"ub\"]\n[runtime]\npolicy = \"expected_cost\"\nbudget_fraction = 0.05\nrng_seed = 3\n",
        )
        .unwrap();
        let flags = RuntimeFlags { config: None, policy: None, budget: Some(0.2), seed: Some(9), wake_interval_ms: None };
        let cfg = flags.resolve(&file).unwrap();
        assert_eq!(cfg.policy, PolicyKind::ExpectedCost);
        assert_eq!(cfg.budget_fraction, 0.2);
        assert_eq!(cfg.rng_seed, Some(9));
        let checks = CheckFlags { sanitizers: None }.resolve(&file).unwrap();
        assert!(checks.enable_address && checks.enable_ub);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("colour = 1\n").is_err());
        assert!(toml::from_str::<FileConfig>("[runtime]\nbudget = 1\n").is_err());
    }

    #[test]
    fn metadata_sits_next_to_the_program() {
        assert_eq!(metadata_path_for(Path::new("out/a.built.pir")), PathBuf::from("out/a.built.meta.json"));
    }
}
