//! Cooperative environments with per-agent textual observations.
//!
//! Each environment is a value-semantic state machine: `step` takes a state by
//! reference and returns the successor, so copies can be stepped in parallel.

mod kitchen;
mod piston;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use kitchen::{Facing, Item, KitchenGridState, Tile, KITCHEN_LAYOUT};
pub use piston::{PistonLineState, BALL_MAX_SPEED, BALL_ROLL_SPEED, HEIGHT_STEP};

use crate::error::{Error, Result};
use crate::types::{Action, AgentId, TextObservation};

pub const PISTON_ACTIONS: &[&str] = &["up", "down", "hold"];
pub const KITCHEN_ACTIONS: &[&str] = &["north", "south", "east", "west", "interact", "wait"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    PistonLine,
    KitchenGrid,
}

impl EnvName {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::PistonLine => "piston_line",
            EnvName::KitchenGrid => "kitchen_grid",
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "piston_line" => Ok(EnvName::PistonLine),
            "kitchen_grid" => Ok(EnvName::KitchenGrid),
            other => Err(Error::env(format!("unknown environment '{other}'"))),
        }
    }
}

/// Tunable environment parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    /// Reward per cell of leftward ball progress.
    pub alpha: f64,
    /// Subtracted from the piston reward at every step.
    pub time_penalty: f64,
    /// Half-width of each agent's view, in cells.
    pub visibility: usize,
    pub delivery_reward: f64,
    pub delivery_quota: u32,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            time_penalty: 0.1,
            visibility: 2,
            delivery_reward: 20.0,
            delivery_quota: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvState {
    Piston(PistonLineState),
    Kitchen(KitchenGridState),
}

impl EnvState {
    pub fn step_count(&self) -> usize {
        match self {
            EnvState::Piston(s) => s.step_count,
            EnvState::Kitchen(s) => s.step_count,
        }
    }

    pub fn done(&self) -> bool {
        match self {
            EnvState::Piston(s) => s.done,
            EnvState::Kitchen(s) => s.done,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub observations: Vec<TextObservation>,
    pub done: bool,
}

/// A configured environment instance: name, team size, horizon and params.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    name: EnvName,
    n_agents: usize,
    horizon: usize,
    params: EnvParams,
}

impl Environment {
    pub fn new(name: EnvName, n_agents: usize, horizon: usize, params: EnvParams) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::env(format!("{name} requires at least 1 agent")));
        }
        if name == EnvName::KitchenGrid && n_agents != 2 {
            return Err(Error::env("kitchen_grid requires 2 agents"));
        }
        if horizon == 0 {
            return Err(Error::env("horizon must be at least 1"));
        }
        Ok(Self {
            name,
            n_agents,
            horizon,
            params,
        })
    }

    pub fn from_name(
        name: &str,
        n_agents: usize,
        horizon: usize,
        params: EnvParams,
    ) -> Result<Self> {
        Self::new(name.parse()?, n_agents, horizon, params)
    }

    pub fn name(&self) -> EnvName {
        self.name
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn action_vocabulary(&self, agent: AgentId) -> Result<&'static [&'static str]> {
        self.check_agent(agent)?;
        Ok(vocabulary(self.name))
    }

    /// Action used when a completion cannot be parsed.
    pub fn fallback_action(&self) -> &'static str {
        match self.name {
            EnvName::PistonLine => "hold",
            EnvName::KitchenGrid => "wait",
        }
    }

    pub fn reset(&self, seed: u64) -> (EnvState, Vec<TextObservation>) {
        let state = match self.name {
            EnvName::PistonLine => EnvState::Piston(PistonLineState::initial(self.n_agents, seed)),
            EnvName::KitchenGrid => EnvState::Kitchen(KitchenGridState::initial(seed)),
        };
        let obs = self.observe_all(&state);
        (state, obs)
    }

    pub fn step(&self, state: &EnvState, joint_action: &[Action]) -> Result<StepOutcome> {
        if state.done() {
            return Err(Error::env("step called on a finished episode"));
        }
        if joint_action.len() != self.n_agents {
            return Err(Error::env(format!(
                "expected {} actions, got {}",
                self.n_agents,
                joint_action.len()
            )));
        }
        let vocab = vocabulary(self.name);
        for (i, a) in joint_action.iter().enumerate() {
            if a.agent.0 != i {
                return Err(Error::env(format!(
                    "action {i} belongs to agent {}",
                    a.agent
                )));
            }
            if !vocab.contains(&a.name.as_str()) {
                return Err(Error::env(format!(
                    "agent {i}: action '{}' is not in the {} vocabulary",
                    a.name, self.name
                )));
            }
        }
        let names: Vec<&str> = joint_action.iter().map(|a| a.name.as_str()).collect();
        let (next, reward) = match state {
            EnvState::Piston(s) => {
                let (n, r) = s.advance(&names, &self.params, self.horizon);
                (EnvState::Piston(n), r)
            }
            EnvState::Kitchen(s) => {
                let (n, r) = s.advance(&names, &self.params, self.horizon);
                (EnvState::Kitchen(n), r)
            }
        };
        let observations = self.observe_all(&next);
        let done = next.done();
        Ok(StepOutcome {
            state: next,
            reward,
            observations,
            done,
        })
    }

    pub fn textualize(&self, state: &EnvState, agent: AgentId) -> TextObservation {
        let text = match state {
            EnvState::Piston(s) => s.local_text(agent.0, self.params.visibility),
            EnvState::Kitchen(s) => s.local_text(agent.0, self.params.visibility),
        };
        TextObservation {
            agent,
            step: state.step_count(),
            text,
        }
    }

    /// Full-state description; reserved for the centralized critic.
    pub fn global_textualize(&self, state: &EnvState) -> String {
        match state {
            EnvState::Piston(s) => s.global_text(self.horizon),
            EnvState::Kitchen(s) => s.global_text(self.horizon),
        }
    }

    fn observe_all(&self, state: &EnvState) -> Vec<TextObservation> {
        (0..self.n_agents)
            .map(|i| self.textualize(state, AgentId(i)))
            .collect()
    }

    fn check_agent(&self, agent: AgentId) -> Result<()> {
        AgentId::checked(agent.0, self.n_agents).map(|_| ())
    }
}

/// Vocabulary by environment name, without needing a configured instance.
pub fn action_vocabulary(env_name: &str, agent: AgentId) -> Result<&'static [&'static str]> {
    let name: EnvName = env_name.parse()?;
    let _ = agent;
    Ok(vocabulary(name))
}

fn vocabulary(name: EnvName) -> &'static [&'static str] {
    match name {
        EnvName::PistonLine => PISTON_ACTIONS,
        EnvName::KitchenGrid => KITCHEN_ACTIONS,
    }
}

/// Prints a real with two decimals when that is exact, otherwise with the
/// shortest representation that round-trips. Keeps state texts injective.
pub(crate) fn fmt_real(x: f64) -> String {
    let two = format!("{x:.2}");
    if two.parse::<f64>().ok() == Some(x) {
        two
    } else {
        format!("{x}")
    }
}
