//! Centralized training: credit assignment, language gradients, and one
//! aggregated policy update per agent per iteration.
//!
//! Phases run as barriers (all credits, then all gradients, then all
//! updates). Policies are immutable values, so a failure anywhere leaves the
//! caller's policies exactly as they were.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::backend::{ChatBackend, ChatRequest, OperatorTag, Sampling};
use crate::error::{Error, Result};
use crate::metrics::episodic_return;
use crate::prompts::{
    own_excerpt, parse_critic, parse_gradient, parse_optimizer, parse_reflection, parse_synthesis,
    render_aggregator, render_critic, render_gradient, render_optimizer, render_reflection,
    CriticPromptOptions, ParseError,
};
use crate::types::{AgentId, Clock, LanguageCredit, LanguageGradient, LanguagePolicy, Trajectory};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CreditMode {
    /// One critic call per trajectory, split into N sections.
    #[default]
    Joint,
    /// One focused critic call per (trajectory, agent).
    PerAgent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningOptions {
    pub credit_mode: CreditMode,
    /// Include the agent's own observation/action sequence in gradient prompts.
    pub gradient_excerpt: bool,
    /// Token budget for the serialized trajectory in critic prompts.
    pub critic_prompt_tokens: usize,
    pub concurrent: bool,
}

impl Default for LearningOptions {
    fn default() -> Self {
        Self {
            credit_mode: CreditMode::Joint,
            gradient_excerpt: false,
            critic_prompt_tokens: 6000,
            concurrent: true,
        }
    }
}

/// Everything `train_iteration` needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationSettings {
    pub credit_assignment_enabled: bool,
    pub discount: f64,
    pub learning: LearningOptions,
    pub sampling: Sampling,
}

impl Default for IterationSettings {
    fn default() -> Self {
        Self {
            credit_assignment_enabled: true,
            discount: 1.0,
            learning: LearningOptions::default(),
            sampling: Sampling::default(),
        }
    }
}

/// Result of one training iteration; every intermediate text is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub policies: Vec<LanguagePolicy>,
    /// `credits[k][i]`: credit for agent `i` on trajectory `k`.
    pub credits: Vec<Vec<LanguageCredit>>,
    /// `gradients[i][k]`: gradient for agent `i` from trajectory `k`.
    pub gradients: Vec<Vec<LanguageGradient>>,
    /// Aggregated gradient per agent.
    pub syntheses: Vec<String>,
}

/// Asks once; on a parse failure asks again with the failed reply and a
/// format reminder appended.
fn ask_parsed<T>(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    reminder: &str,
    parse: impl Fn(&str) -> Result<T, ParseError>,
) -> Result<Result<T, ParseError>> {
    let first = backend.complete(request)?;
    match parse(&first.text) {
        Ok(v) => Ok(Ok(v)),
        Err(e) => {
            debug!(tag = %request.tag, "unparsable reply ({e}); re-prompting");
            let second = backend.complete(&request.reprompt(&first.text, reminder))?;
            Ok(parse(&second.text))
        }
    }
}

fn critic_options(settings: &IterationSettings, focus: Option<AgentId>) -> CriticPromptOptions {
    CriticPromptOptions {
        prompt_tokens: settings.learning.critic_prompt_tokens,
        focus,
    }
}

fn check_team(trajectory: &Trajectory, n_agents: usize) -> Result<()> {
    trajectory.validate()?;
    if trajectory.n_agents() != n_agents {
        return Err(Error::invalid(format!(
            "trajectory {} has {} agents, expected {n_agents}",
            trajectory.id,
            trajectory.n_agents()
        )));
    }
    Ok(())
}

const CRITIC_REMINDER: &str = "Your reply had no \"Credit Assignment [Agent i]:\" sections. \
     Answer again with one such section per agent, using the agent numbers.";

/// Per-agent credits for one trajectory from the centralized critic.
pub fn assign_credits(
    backend: &dyn ChatBackend,
    trajectory: &Trajectory,
    n_agents: usize,
    settings: &IterationSettings,
) -> Result<Vec<LanguageCredit>> {
    check_team(trajectory, n_agents)?;
    let globals = trajectory.global_texts();
    let team_reward = episodic_return(trajectory, settings.discount);
    let decoding = settings.sampling.decoding(OperatorTag::Critic);
    let failure = |source| Error::CreditFailure {
        trajectory_id: trajectory.id.clone(),
        source,
    };
    let credit = |i: usize, (text, polarity)| LanguageCredit {
        trajectory_id: trajectory.id.clone(),
        agent: AgentId(i),
        text,
        polarity,
    };
    match settings.learning.credit_mode {
        CreditMode::Joint => {
            let req = render_critic(
                trajectory,
                &globals,
                team_reward,
                n_agents,
                critic_options(settings, None),
                decoding,
            )?;
            let parsed = ask_parsed(backend, &req, CRITIC_REMINDER, |t| {
                parse_critic(t, n_agents)
            })?
            .map_err(failure)?;
            Ok(parsed
                .sections
                .into_iter()
                .enumerate()
                .map(|(i, s)| credit(i, s))
                .collect())
        }
        CreditMode::PerAgent => (0..n_agents)
            .map(|i| {
                let req = render_critic(
                    trajectory,
                    &globals,
                    team_reward,
                    n_agents,
                    critic_options(settings, Some(AgentId(i))),
                    decoding,
                )?;
                let mut parsed = ask_parsed(backend, &req, CRITIC_REMINDER, |t| {
                    parse_critic(t, n_agents)
                })?
                .map_err(failure)?;
                Ok(credit(i, parsed.sections.swap_remove(i)))
            })
            .collect(),
    }
}

/// Ablation path: one team-level critique, copied to every agent.
pub fn global_reflection(
    backend: &dyn ChatBackend,
    trajectory: &Trajectory,
    n_agents: usize,
    settings: &IterationSettings,
) -> Result<Vec<LanguageCredit>> {
    check_team(trajectory, n_agents)?;
    let globals = trajectory.global_texts();
    let req = render_reflection(
        trajectory,
        &globals,
        episodic_return(trajectory, settings.discount),
        n_agents,
        critic_options(settings, None),
        settings.sampling.decoding(OperatorTag::Critic),
    )?;
    let reminder =
        "Your reply had no \"Team Critique:\" section. Answer again in the output format.";
    let text = ask_parsed(backend, &req, reminder, parse_reflection)?.map_err(|source| {
        Error::CreditFailure {
            trajectory_id: trajectory.id.clone(),
            source,
        }
    })?;
    let polarity = crate::prompts::PolarityLexicon::default().classify(&text);
    Ok((0..n_agents)
        .map(|i| LanguageCredit {
            trajectory_id: trajectory.id.clone(),
            agent: AgentId(i),
            text: text.clone(),
            polarity,
        })
        .collect())
}

pub fn estimate_gradient(
    backend: &dyn ChatBackend,
    policy: &LanguagePolicy,
    credit: &LanguageCredit,
    trajectory: &Trajectory,
    settings: &IterationSettings,
) -> Result<LanguageGradient> {
    let excerpt = if settings.learning.gradient_excerpt {
        own_excerpt(trajectory, policy.agent())
    } else {
        String::new()
    };
    let req = render_gradient(
        policy,
        credit,
        &excerpt,
        settings.sampling.decoding(OperatorTag::Grad),
    )?;
    let reminder =
        "Your reply had no \"Language Gradient:\" section. Answer again in the output format.";
    let text = ask_parsed(backend, &req, reminder, parse_gradient)?.map_err(|source| {
        Error::GradientFailure {
            trajectory_id: credit.trajectory_id.clone(),
            agent: policy.agent().0,
            source,
        }
    })?;
    Ok(LanguageGradient {
        trajectory_id: credit.trajectory_id.clone(),
        agent: policy.agent(),
        text,
    })
}

/// The aggregated direction and the policy it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyUpdate {
    pub synthesis: String,
    pub policy: LanguagePolicy,
}

/// One aggregator call over all gradients, then one optimizer call; the
/// result is a new revision even when the text is unchanged.
pub fn aggregate_and_update(
    backend: &dyn ChatBackend,
    policy: &LanguagePolicy,
    gradients: &[LanguageGradient],
    settings: &IterationSettings,
    clock: &dyn Clock,
) -> Result<PolicyUpdate> {
    if let Some(g) = gradients.iter().find(|g| g.agent != policy.agent()) {
        return Err(Error::invalid(format!(
            "gradient for agent {} cannot update the policy of agent {}",
            g.agent,
            policy.agent()
        )));
    }
    let agent = policy.agent().0;
    let req = render_aggregator(gradients, settings.sampling.decoding(OperatorTag::Agg))?;
    let reminder =
        "Your reply had no \"Aggregated Gradient:\" section. Answer again in the output format.";
    let synthesis = ask_parsed(backend, &req, reminder, parse_synthesis)?
        .map_err(|source| Error::UpdateFailure { agent, source })?;
    let req = render_optimizer(
        policy,
        &synthesis,
        settings.sampling.decoding(OperatorTag::Opt),
    )?;
    let reminder =
        "Your reply had no \"Updated Policy:\" section. Answer again in the output format.";
    let text = ask_parsed(backend, &req, reminder, parse_optimizer)?
        .map_err(|source| Error::UpdateFailure { agent, source })?;
    Ok(PolicyUpdate {
        synthesis,
        policy: policy.revised(text, clock)?,
    })
}

fn maybe_par<T: Send, F: Fn(usize) -> Result<T> + Sync + Send>(
    n: usize,
    concurrent: bool,
    f: F,
) -> Result<Vec<T>> {
    if concurrent {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// Credits for every (trajectory, agent), gradients for every (agent,
/// trajectory), then one update per agent.
pub fn train_iteration(
    backend: &dyn ChatBackend,
    policies: &[LanguagePolicy],
    trajectories: &[Trajectory],
    settings: &IterationSettings,
    clock: &dyn Clock,
) -> Result<IterationOutcome> {
    if trajectories.is_empty() {
        return Err(Error::NoTrajectories);
    }
    let n = policies.len();
    if n == 0 {
        return Err(Error::invalid("no policies to train"));
    }
    if let Some((i, p)) = policies.iter().enumerate().find(|(i, p)| p.agent().0 != *i) {
        return Err(Error::invalid(format!(
            "policy {i} belongs to agent {}",
            p.agent()
        )));
    }
    let concurrent = settings.learning.concurrent;

    let credits: Vec<Vec<LanguageCredit>> = maybe_par(trajectories.len(), concurrent, |k| {
        if settings.credit_assignment_enabled {
            assign_credits(backend, &trajectories[k], n, settings)
        } else {
            global_reflection(backend, &trajectories[k], n, settings)
        }
    })?;

    let k_count = trajectories.len();
    let flat: Vec<LanguageGradient> = maybe_par(n * k_count, concurrent, |j| {
        let (i, k) = (j / k_count, j % k_count);
        estimate_gradient(
            backend,
            &policies[i],
            &credits[k][i],
            &trajectories[k],
            settings,
        )
    })?;
    let mut gradients: Vec<Vec<LanguageGradient>> = vec![Vec::with_capacity(k_count); n];
    for (j, g) in flat.into_iter().enumerate() {
        gradients[j / k_count].push(g);
    }

    let updates: Vec<PolicyUpdate> = maybe_par(n, concurrent, |i| {
        aggregate_and_update(backend, &policies[i], &gradients[i], settings, clock)
    })?;
    let (syntheses, updated) = updates.into_iter().map(|u| (u.synthesis, u.policy)).unzip();
    Ok(IterationOutcome {
        policies: updated,
        credits,
        gradients,
        syntheses,
    })
}
