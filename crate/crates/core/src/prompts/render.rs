use std::collections::BTreeMap;

use super::{Template, TemplateKind};
use crate::backend::{ChatMessage, ChatRequest, Decoding, OperatorTag, NO_CHANGE};
use crate::env::fmt_real;
use crate::error::{Error, Result};
use crate::metrics::episodic_return;
use crate::types::{
    AgentId, LanguageCredit, LanguageGradient, LanguagePolicy, TextObservation, Trajectory,
};

/// Characters per token assumed when sizing the critic's trajectory section.
pub const ELISION_CHARS_PER_TOKEN: usize = 4;

/// Longest own-trajectory excerpt, in steps, given to the gradient estimator.
const EXCERPT_MAX_STEPS: usize = 40;

fn request(
    kind: TemplateKind,
    tag: OperatorTag,
    bindings: &BTreeMap<&str, String>,
    decoding: Decoding,
) -> Result<ChatRequest> {
    let (system, user) = Template::get(kind).render(bindings)?;
    Ok(ChatRequest {
        messages: vec![ChatMessage::system(system), ChatMessage::user(user)],
        temperature: decoding.temperature,
        max_tokens: decoding.max_tokens,
        tag,
    })
}

pub fn render_actor(
    policy: &LanguagePolicy,
    obs: &TextObservation,
    vocabulary: &[&str],
    decoding: Decoding,
) -> Result<ChatRequest> {
    if vocabulary.is_empty() {
        return Err(Error::invalid(
            "actor prompt needs a non-empty action vocabulary",
        ));
    }
    if policy.agent() != obs.agent {
        return Err(Error::invalid(format!(
            "policy of agent {} cannot act on the observation of agent {}",
            policy.agent(),
            obs.agent
        )));
    }
    let b = BTreeMap::from([
        ("agent_id", policy.agent().to_string()),
        ("policy", policy.text().to_string()),
        ("observation", obs.text.clone()),
        ("actions", vocabulary.join(", ")),
    ]);
    request(TemplateKind::Actor, OperatorTag::Actor, &b, decoding)
}

/// Options for rendering the centralized critic prompt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticPromptOptions {
    /// Token budget for the serialized trajectory section.
    pub prompt_tokens: usize,
    /// Ask for a single agent's section only.
    pub focus: Option<AgentId>,
}

impl Default for CriticPromptOptions {
    fn default() -> Self {
        Self {
            prompt_tokens: 6000,
            focus: None,
        }
    }
}

/// Kept `(head, tail)` step counts under a budget of `budget_steps`, or
/// `None` when everything fits.
pub fn elision_plan(n_steps: usize, budget_steps: usize) -> Option<(usize, usize)> {
    if budget_steps >= n_steps {
        return None;
    }
    let budget = budget_steps.max(2);
    if budget >= n_steps {
        return None;
    }
    Some((budget.div_ceil(2), budget / 2))
}

/// One text block per step: global state, joint action and reward.
pub fn serialize_steps(trajectory: &Trajectory, global_texts: &[&str]) -> Vec<String> {
    trajectory
        .steps
        .iter()
        .map(|step| {
            let joint: Vec<String> = step
                .joint_action
                .iter()
                .map(|a| format!("agent {}: {}", a.agent, a.name))
                .collect();
            format!(
                "Step {}\n  State: {}\n  Joint Action: {}\n  Reward: {}",
                step.index,
                global_texts[step.index],
                joint.join("; "),
                fmt_real(step.reward)
            )
        })
        .collect()
}

fn trajectory_section(
    trajectory: &Trajectory,
    global_texts: &[&str],
    prompt_tokens: usize,
) -> String {
    let blocks = serialize_steps(trajectory, global_texts);
    let n = blocks.len();
    let budget_chars = prompt_tokens.saturating_mul(ELISION_CHARS_PER_TOKEN);
    let total: usize = blocks.iter().map(|b| b.len() + 1).sum();
    let plan = if total <= budget_chars {
        None
    } else {
        let widest = blocks.iter().map(|b| b.len() + 1).max().unwrap_or(1);
        elision_plan(n, budget_chars / widest)
    };
    let mut lines: Vec<String> = match plan {
        None => blocks,
        Some((head, tail)) => {
            let elided = n - head - tail;
            let mut kept: Vec<String> = blocks[..head].to_vec();
            kept.push(format!("[... {elided} steps elided ...]"));
            kept.extend_from_slice(&blocks[n - tail..]);
            kept
        }
    };
    lines.push(format!("Final State: {}", global_texts[n]));
    lines.join("\n")
}

fn team_reward_text(trajectory: &Trajectory) -> String {
    format!(
        "{} (sum of per-step team rewards over {} steps)",
        fmt_real(episodic_return(trajectory, 1.0)),
        trajectory.steps.len()
    )
}

fn critic_bindings(
    trajectory: &Trajectory,
    global_texts: &[&str],
    team_reward: f64,
    n_agents: usize,
    prompt_tokens: usize,
) -> Result<BTreeMap<&'static str, String>> {
    if n_agents == 0 {
        return Err(Error::invalid("critic prompt needs at least one agent"));
    }
    if global_texts.len() != trajectory.steps.len() + 1 {
        return Err(Error::invalid(format!(
            "critic prompt needs {} global state texts, got {}",
            trajectory.steps.len() + 1,
            global_texts.len()
        )));
    }
    let mut reward = team_reward_text(trajectory);
    if (team_reward - episodic_return(trajectory, 1.0)).abs() > 1e-12 {
        reward = format!("{} (discounted return); {reward}", fmt_real(team_reward));
    }
    Ok(BTreeMap::from([
        ("n_agents", n_agents.to_string()),
        ("last_agent", (n_agents - 1).to_string()),
        (
            "trajectory",
            trajectory_section(trajectory, global_texts, prompt_tokens),
        ),
        ("team_reward", reward),
    ]))
}

pub fn render_critic(
    trajectory: &Trajectory,
    global_texts: &[&str],
    team_reward: f64,
    n_agents: usize,
    options: CriticPromptOptions,
    decoding: Decoding,
) -> Result<ChatRequest> {
    let mut b = critic_bindings(
        trajectory,
        global_texts,
        team_reward,
        n_agents,
        options.prompt_tokens,
    )?;
    match options.focus {
        Some(agent) => {
            AgentId::checked(agent.0, n_agents)?;
            b.insert("focus", format!(" Focus on Agent {agent}."));
            b.insert(
                "section_rule",
                format!("Write only the section for Agent {agent}, as \"Credit Assignment [Agent {agent}]:\"."),
            );
        }
        None => {
            b.insert("focus", String::new());
            b.insert(
                "section_rule",
                format!(
                    "Write one such section for every agent from Agent 0 to Agent {}, replacing i with the agent number.",
                    n_agents - 1
                ),
            );
        }
    }
    request(TemplateKind::Critic, OperatorTag::Critic, &b, decoding)
}

/// Team-level variant of the critic prompt used when credit assignment is off.
pub fn render_reflection(
    trajectory: &Trajectory,
    global_texts: &[&str],
    team_reward: f64,
    n_agents: usize,
    options: CriticPromptOptions,
    decoding: Decoding,
) -> Result<ChatRequest> {
    let b = critic_bindings(
        trajectory,
        global_texts,
        team_reward,
        n_agents,
        options.prompt_tokens,
    )?;
    request(TemplateKind::Reflection, OperatorTag::Critic, &b, decoding)
}

/// The agent's own observation/action sequence from a trajectory.
pub fn own_excerpt(trajectory: &Trajectory, agent: AgentId) -> String {
    let lines: Vec<String> = trajectory
        .steps
        .iter()
        .filter_map(|s| {
            let obs = s.observations.get(agent.0)?;
            let act = s.joint_action.get(agent.0)?;
            Some(format!(
                "t={}: observed \"{}\" -> {}",
                s.index, obs.text, act.name
            ))
        })
        .collect();
    match elision_plan(lines.len(), EXCERPT_MAX_STEPS) {
        None => lines.join("\n"),
        Some((head, tail)) => {
            let n = lines.len();
            let mut kept = lines[..head].to_vec();
            kept.push(format!("[... {} steps elided ...]", n - head - tail));
            kept.extend_from_slice(&lines[n - tail..]);
            kept.join("\n")
        }
    }
}

pub fn render_gradient(
    policy: &LanguagePolicy,
    credit: &LanguageCredit,
    trajectory_excerpt: &str,
    decoding: Decoding,
) -> Result<ChatRequest> {
    if credit.agent != policy.agent() {
        return Err(Error::invalid(format!(
            "credit for agent {} cannot update the policy of agent {}",
            credit.agent,
            policy.agent()
        )));
    }
    let credit_text = if credit.text.trim().is_empty() {
        "(the critic assigned no credit to this agent)".to_string()
    } else {
        credit.text.clone()
    };
    let excerpt_section = if trajectory_excerpt.trim().is_empty() {
        String::new()
    } else {
        format!("- Own State-Action Sequence:\n{trajectory_excerpt}\n")
    };
    let b = BTreeMap::from([
        ("agent_id", policy.agent().to_string()),
        ("credit", credit_text),
        ("policy", policy.text().to_string()),
        ("excerpt_section", excerpt_section),
    ]);
    request(TemplateKind::GradEstimator, OperatorTag::Grad, &b, decoding)
}

pub(crate) fn is_no_change(text: &str) -> bool {
    text.trim()
        .trim_end_matches('.')
        .trim()
        .eq_ignore_ascii_case(NO_CHANGE)
}

pub fn render_aggregator(
    gradients: &[LanguageGradient],
    decoding: Decoding,
) -> Result<ChatRequest> {
    let first = gradients
        .first()
        .ok_or_else(|| Error::invalid("aggregator needs at least one gradient"))?;
    if let Some(other) = gradients.iter().find(|g| g.agent != first.agent) {
        return Err(Error::invalid(format!(
            "aggregator batch mixes agents {} and {}",
            first.agent, other.agent
        )));
    }
    let blocks: Vec<String> = gradients
        .iter()
        .enumerate()
        .map(|(k, g)| {
            format!(
                "[Gradient {} | trajectory {}]\n{}",
                k + 1,
                g.trajectory_id,
                g.text
            )
        })
        .collect();
    let no_change = gradients.iter().filter(|g| is_no_change(&g.text)).count();
    let b = BTreeMap::from([
        ("agent_id", first.agent.to_string()),
        ("count", gradients.len().to_string()),
        ("no_change_count", no_change.to_string()),
        ("gradients", blocks.join("\n")),
    ]);
    request(TemplateKind::Aggregator, OperatorTag::Agg, &b, decoding)
}

pub fn render_optimizer(
    policy: &LanguagePolicy,
    aggregated_gradient: &str,
    decoding: Decoding,
) -> Result<ChatRequest> {
    let b = BTreeMap::from([
        ("aggregated", aggregated_gradient.to_string()),
        ("policy", policy.text().to_string()),
    ]);
    request(TemplateKind::Optimizer, OperatorTag::Opt, &b, decoding)
}
