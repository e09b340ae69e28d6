//! Domain types shared by every stage of a run.
//!
//! Everything here is a plain value: constructed once, then cloned or shared
//! across threads without interior mutability.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of an agent within a team of `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub usize);

impl AgentId {
    pub fn index(self) -> usize {
        self.0
    }

    /// Checks the id against the run-level team size.
    pub fn checked(index: usize, n_agents: usize) -> Result<Self> {
        if index < n_agents {
            Ok(AgentId(index))
        } else {
            Err(Error::invalid(format!(
                "agent {index} out of range for a team of {n_agents}"
            )))
        }
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Millisecond timestamp source for policy history entries.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

/// Wall-clock time since the Unix epoch.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Deterministic clock: starts at `start` and advances by `tick` on every read.
#[derive(Debug)]
pub struct LogicalClock {
    next: AtomicU64,
    tick: u64,
}

impl LogicalClock {
    pub fn new(start: u64, tick: u64) -> Self {
        Self {
            next: AtomicU64::new(start),
            tick,
        }
    }
}

impl Clock for LogicalClock {
    fn now_ms(&self) -> u64 {
        self.next.fetch_add(self.tick, Ordering::SeqCst)
    }
}

/// One entry in a policy's append-only history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRevision {
    pub version: u32,
    pub text: String,
    pub timestamp_ms: u64,
}

/// An agent's behaviour written as natural-language instructions.
///
/// Updates never mutate a policy; [`LanguagePolicy::revised`] returns a new
/// value whose history is the old history plus one entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguagePolicy {
    agent: AgentId,
    history: Vec<PolicyRevision>,
}

impl LanguagePolicy {
    pub fn new(agent: AgentId, text: impl Into<String>, clock: &dyn Clock) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::invalid(format!(
                "policy text for agent {agent} must not be empty"
            )));
        }
        Ok(Self {
            agent,
            history: vec![PolicyRevision {
                version: 0,
                text,
                timestamp_ms: clock.now_ms(),
            }],
        })
    }

    /// Rebuilds a policy from stored revisions, checking the version sequence.
    pub fn from_history(agent: AgentId, history: Vec<PolicyRevision>) -> Result<Self> {
        if history.is_empty() {
            return Err(Error::invalid(format!(
                "agent {agent}: empty policy history"
            )));
        }
        for (i, rev) in history.iter().enumerate() {
            if rev.version as usize != i {
                return Err(Error::invalid(format!(
                    "agent {agent}: history entry {i} has version {}",
                    rev.version
                )));
            }
            if rev.text.trim().is_empty() {
                return Err(Error::invalid(format!(
                    "agent {agent}: version {i} has empty text"
                )));
            }
        }
        Ok(Self { agent, history })
    }

    pub fn agent(&self) -> AgentId {
        self.agent
    }

    pub fn text(&self) -> &str {
        &self.current().text
    }

    pub fn version(&self) -> u32 {
        self.current().version
    }

    pub fn history(&self) -> &[PolicyRevision] {
        &self.history
    }

    pub fn current(&self) -> &PolicyRevision {
        self.history.last().expect("history is never empty")
    }

    pub fn revised(&self, text: impl Into<String>, clock: &dyn Clock) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::invalid(format!(
                "updated policy text for agent {} must not be empty",
                self.agent
            )));
        }
        let mut history = self.history.clone();
        history.push(PolicyRevision {
            version: self.version() + 1,
            text,
            timestamp_ms: clock.now_ms(),
        });
        Ok(Self {
            agent: self.agent,
            history,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextObservation {
    pub agent: AgentId,
    pub step: usize,
    pub text: String,
}

/// Set on an action when the completion could not be parsed and the
/// environment's fallback action was used instead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub attempts: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub agent: AgentId,
    pub name: String,
    pub raw_output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_failure: Option<ParseFailure>,
}

impl Action {
    pub fn new(agent: AgentId, name: impl Into<String>) -> Self {
        Self {
            agent,
            name: name.into(),
            raw_output: String::new(),
            parse_failure: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub observations: Vec<TextObservation>,
    pub joint_action: Vec<Action>,
    pub reward: f64,
    /// Centralized view of the state the joint action was taken in.
    pub global_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub env_name: String,
    pub seed: u64,
    pub steps: Vec<Step>,
    pub final_observations: Vec<TextObservation>,
    /// Centralized view of the terminal state.
    pub final_global_text: String,
}

impl Trajectory {
    pub fn n_agents(&self) -> usize {
        self.final_observations.len()
    }

    /// Global texts for `s_0 .. s_T`, one more than the number of steps.
    pub fn global_texts(&self) -> Vec<&str> {
        self.steps
            .iter()
            .map(|s| s.global_text.as_str())
            .chain(std::iter::once(self.final_global_text.as_str()))
            .collect()
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.reward)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.final_observations.len();
        if self.steps.is_empty() {
            return Err(Error::invalid(format!("trajectory {}: no steps", self.id)));
        }
        if n == 0 {
            return Err(Error::invalid(format!(
                "trajectory {}: no final observations",
                self.id
            )));
        }
        for (t, step) in self.steps.iter().enumerate() {
            if step.index != t {
                return Err(Error::invalid(format!(
                    "trajectory {}: step {t} carries index {}",
                    self.id, step.index
                )));
            }
            if step.observations.len() != n || step.joint_action.len() != n {
                return Err(Error::invalid(format!(
                    "trajectory {}: step {t} does not cover {n} agents",
                    self.id
                )));
            }
            let misordered = step
                .observations
                .iter()
                .zip(&step.joint_action)
                .enumerate()
                .any(|(i, (o, a))| o.agent.0 != i || a.agent.0 != i);
            if misordered {
                return Err(Error::invalid(format!(
                    "trajectory {}: step {t} is not ordered by agent",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
    Mixed,
    Neutral,
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Mixed => "mixed",
            Polarity::Neutral => "neutral",
        };
        f.write_str(s)
    }
}

/// Per-agent attribution produced by the critic for one trajectory.
///
/// `text` may be empty only when the critic omitted the agent's section, in
/// which case polarity is neutral.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageCredit {
    pub trajectory_id: String,
    pub agent: AgentId,
    pub text: String,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageGradient {
    pub trajectory_id: String,
    pub agent: AgentId,
    pub text: String,
}

/// FNV-1a over a byte string; stable across platforms and releases.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3)
    })
}
