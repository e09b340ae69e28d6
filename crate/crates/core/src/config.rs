//! Run configuration: a TOML file, `path=value` overrides on top, defaults
//! underneath.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{BackendDescriptor, Sampling};
use crate::env::{EnvName, EnvParams, Environment};
use crate::error::{Error, Result};
use crate::learning::{IterationSettings, LearningOptions};
use crate::types::{AgentId, Clock, LanguagePolicy};

pub const DEFAULT_PISTON_POLICY: &str =
    "Lower your piston when the ball comes close so it can keep rolling left; down-threshold: 6 cells.";
pub const DEFAULT_KITCHEN_POLICY: &str =
    "Cook onion soup with your partner: bring onions to the pot until it holds three, \
     fetch a plate once the soup is ready, and carry the soup to the delivery window.";

/// Initial policy texts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Shared initial text; the environment's default when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<String>,
    /// Per-agent texts keyed by agent index, overriding `initial`.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub agents: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env_name: String,
    pub n_agents: usize,
    pub horizon: usize,
    pub rollouts_per_iteration: usize,
    pub iterations: usize,
    pub discount: f64,
    pub seed: u64,
    pub eval_episodes: usize,
    pub credit_assignment_enabled: bool,
    pub run_dir: PathBuf,
    pub env: EnvParams,
    pub backend: BackendDescriptor,
    pub policy: PolicyConfig,
    pub learning: LearningOptions,
    pub sampling: Sampling,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env_name: "piston_line".into(),
            n_agents: 5,
            horizon: 30,
            rollouts_per_iteration: 3,
            iterations: 3,
            discount: 1.0,
            seed: 0,
            eval_episodes: 10,
            credit_assignment_enabled: true,
            run_dir: PathBuf::from("runs/default"),
            env: EnvParams::default(),
            backend: BackendDescriptor::default(),
            policy: PolicyConfig::default(),
            learning: LearningOptions::default(),
            sampling: Sampling::default(),
        }
    }
}

/// Offset separating evaluation seeds from training seeds.
pub const EVAL_SEED_OFFSET: u64 = 1_000_000;

impl RunConfig {
    /// Reads `path`, applies `overrides` (`a.b=value`) and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().trim().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let name: EnvName = match self.env_name.parse() {
            Ok(n) => n,
            Err(_) => {
                return fail(format!(
                    "env_name '{}' is not a known environment",
                    self.env_name
                ))
            }
        };
        for (field, value) in [
            ("n_agents", self.n_agents),
            ("horizon", self.horizon),
            ("rollouts_per_iteration", self.rollouts_per_iteration),
            ("eval_episodes", self.eval_episodes),
            (
                "learning.critic_prompt_tokens",
                self.learning.critic_prompt_tokens,
            ),
        ] {
            if value < 1 {
                return fail(format!("{field} must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return fail(format!(
                "discount must be within [0, 1] (got {})",
                self.discount
            ));
        }
        if name == EnvName::KitchenGrid && self.n_agents != 2 {
            return fail(format!(
                "n_agents must be 2 for kitchen_grid (got {})",
                self.n_agents
            ));
        }
        if self.env.visibility < 1 {
            return fail("env.visibility must be at least 1".into());
        }
        self.backend.validate().map_err(Error::Config)?;
        self.sampling.validate().map_err(Error::Config)?;
        if let Some(text) = &self.policy.initial {
            if text.trim().is_empty() {
                return fail("policy.initial must not be empty".into());
            }
        }
        for (key, text) in &self.policy.agents {
            match key.parse::<usize>() {
                Ok(i) if i < self.n_agents => {}
                _ => {
                    return fail(format!(
                        "policy.agents.{key} does not name an agent below n_agents"
                    ))
                }
            }
            if text.trim().is_empty() {
                return fail(format!("policy.agents.{key} must not be empty"));
            }
        }
        Ok(())
    }

    pub fn env_kind(&self) -> Result<EnvName> {
        self.env_name.parse()
    }

    pub fn environment(&self) -> Result<Environment> {
        Environment::new(
            self.env_kind()?,
            self.n_agents,
            self.horizon,
            self.env.clone(),
        )
    }

    pub fn initial_text(&self, agent: usize) -> Result<String> {
        if let Some(t) = self.policy.agents.get(&agent.to_string()) {
            return Ok(t.clone());
        }
        if let Some(t) = &self.policy.initial {
            return Ok(t.clone());
        }
        Ok(match self.env_kind()? {
            EnvName::PistonLine => DEFAULT_PISTON_POLICY,
            EnvName::KitchenGrid => DEFAULT_KITCHEN_POLICY,
        }
        .to_string())
    }

    pub fn initial_policies(&self, clock: &dyn Clock) -> Result<Vec<LanguagePolicy>> {
        (0..self.n_agents)
            .map(|i| LanguagePolicy::new(AgentId(i), self.initial_text(i)?, clock))
            .collect()
    }

    pub fn iteration_settings(&self) -> IterationSettings {
        IterationSettings {
            credit_assignment_enabled: self.credit_assignment_enabled,
            discount: self.discount,
            learning: self.learning.clone(),
            sampling: self.sampling,
        }
    }

    /// First training seed of iteration `iteration` (1-based).
    pub fn training_seed(&self, iteration: usize) -> u64 {
        self.seed + (iteration.saturating_sub(1) * self.rollouts_per_iteration) as u64
    }

    /// First seed of the held-out evaluation set, shared by every iteration.
    pub fn eval_seed(&self) -> u64 {
        self.seed + EVAL_SEED_OFFSET
    }

    /// Same run apart from the iteration count, which may grow on resume.
    pub fn same_run_as(&self, other: &RunConfig) -> bool {
        let mut a = self.clone();
        a.iterations = other.iterations;
        a.run_dir = other.run_dir.clone();
        &a == other
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML value when
/// it parses as one and as a plain string otherwise.
pub fn apply_override(table: &mut toml::Table, entry: &str) -> Result<()> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{entry}' is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').map(str::trim).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!(
            "override '{entry}' has an empty key"
        )));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("at least one key");
    let mut cursor = table;
    for key in parents {
        let slot = cursor
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = match slot {
            toml::Value::Table(t) => t,
            _ => {
                return Err(Error::Config(format!(
                    "override '{entry}': '{key}' is not a table"
                )))
            }
        };
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}
