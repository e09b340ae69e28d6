//! Deterministic rule-based backend.
//!
//! Each script reads the rendered prompt back with the same line grammar the
//! templates emit and answers from a fixed rule table. A backend may chain
//! several scripts with `+`; a request goes to the first script that handles
//! its tag, and any tag left over gets a neutral default reply.

use std::collections::VecDeque;
use std::sync::LazyLock;

use regex::Regex;

use super::{
    estimate_tokens, BackendError, ChatBackend, ChatRequest, ChatResponse, OperatorTag, Usage,
};
use crate::prompts::{inline_field, section_after};
use crate::types::stable_hash;

/// Gradient phrase that asks the optimizer to lower the embedded threshold.
pub const LOWER_THRESHOLD: &str = "lower your down-threshold";
/// Gradient and synthesis sentinel meaning "leave the policy as it is".
pub const NO_CHANGE: &str = "no change";
/// A down-threshold of `K` cells lets a piston react to a ball up to
/// `DOWN_THRESHOLD_REACH - K` cells to its right.
pub const DOWN_THRESHOLD_REACH: i64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Script {
    PistonExpert,
    KitchenExpert,
    EchoCritic,
    ThresholdOptimizer,
}

impl Script {
    pub fn from_name(name: &str) -> Result<Script, BackendError> {
        match name.trim() {
            "piston_expert" => Ok(Script::PistonExpert),
            "kitchen_expert" => Ok(Script::KitchenExpert),
            "echo_critic" => Ok(Script::EchoCritic),
            "threshold_optimizer" => Ok(Script::ThresholdOptimizer),
            other => Err(BackendError::UnknownScript(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Script::PistonExpert => "piston_expert",
            Script::KitchenExpert => "kitchen_expert",
            Script::EchoCritic => "echo_critic",
            Script::ThresholdOptimizer => "threshold_optimizer",
        }
    }

    pub fn handles(self, tag: OperatorTag) -> bool {
        match self {
            Script::PistonExpert | Script::KitchenExpert => tag == OperatorTag::Actor,
            Script::EchoCritic => tag == OperatorTag::Critic,
            Script::ThresholdOptimizer => {
                matches!(tag, OperatorTag::Grad | OperatorTag::Agg | OperatorTag::Opt)
            }
        }
    }

    fn respond(self, tag: OperatorTag, prompt: &str, seed: u64) -> String {
        match self {
            Script::PistonExpert => piston_actor(prompt),
            Script::KitchenExpert => kitchen_actor(prompt, seed),
            Script::EchoCritic => echo_critic(prompt),
            Script::ThresholdOptimizer => match tag {
                OperatorTag::Grad => threshold_gradient(prompt),
                OperatorTag::Agg => threshold_synthesis(prompt),
                _ => threshold_update(prompt),
            },
        }
    }
}

/// One row of a script's rule table: the condition, the exact completion it
/// produces and, for actor rows, the action that completion encodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleRow {
    pub tag: OperatorTag,
    pub condition: &'static str,
    pub completion: String,
    pub intended_action: Option<&'static str>,
}

/// The rule table of a single script.
pub fn scripted_rules(script_name: &str) -> Result<Vec<RuleRow>, BackendError> {
    let actor = |condition, action: &'static str, reason: &str| RuleRow {
        tag: OperatorTag::Actor,
        condition,
        completion: actor_reply(reason, action),
        intended_action: Some(action),
    };
    let row = |tag, condition, completion: String| RuleRow {
        tag,
        condition,
        completion,
        intended_action: None,
    };
    Ok(match Script::from_name(script_name)? {
        Script::PistonExpert => vec![
            actor(
                "ball visible, at most one cell to the left and within reach on the right, own height > 0",
                "down",
                PISTON_DOWN_REASON,
            ),
            actor("any other observation", "hold", PISTON_HOLD_REASON),
        ],
        Script::KitchenExpert => {
            let mut rows: Vec<RuleRow> = ["north", "south", "east", "west"]
                .into_iter()
                .map(|d| actor("first step toward the current target, or stepping aside (cook 1)", d, KITCHEN_MOVE_REASON))
                .collect();
            rows.push(actor(
                "adjacent to and facing the current target",
                "interact",
                KITCHEN_INTERACT_REASON,
            ));
            rows.push(actor("no free path to the current target", "wait", KITCHEN_WAIT_REASON));
            rows
        }
        Script::EchoCritic => vec![
            row(
                OperatorTag::Critic,
                "agent whose piston blocked the ball in the most states",
                credit_section(0, BLOCKED_CREDIT),
            ),
            row(OperatorTag::Critic, "every other agent", credit_section(1, NEUTRAL_CREDIT)),
            row(OperatorTag::Critic, "team critique request", format!("- Team Critique: {TEAM_CRITIQUE}")),
        ],
        Script::ThresholdOptimizer => vec![
            row(
                OperatorTag::Grad,
                "credit says the agent blocked the ball",
                format!("- Language Gradient: {LOWER_THRESHOLD} by one cell."),
            ),
            row(OperatorTag::Grad, "any other credit", format!("- Language Gradient: {NO_CHANGE}")),
            row(
                OperatorTag::Agg,
                "some gradient asks to lower the threshold",
                format!("- Aggregated Gradient: {LOWER_THRESHOLD} by one cell."),
            ),
            row(OperatorTag::Agg, "all gradients say no change", format!("- Aggregated Gradient: {NO_CHANGE}")),
            row(
                OperatorTag::Opt,
                "synthesis asks to lower the threshold",
                "- Updated Policy:\n<prior policy with its cell threshold reduced by one>".into(),
            ),
            row(OperatorTag::Opt, "otherwise", "- Updated Policy:\n<prior policy>".into()),
        ],
    })
}

/// Backend answering from one or more scripts; a pure function of
/// `(scripts, seed, request)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedBackend {
    scripts: Vec<Script>,
    seed: u64,
}

impl ScriptedBackend {
    pub fn new(scripts: Vec<Script>, seed: u64) -> Self {
        Self { scripts, seed }
    }

    /// Parses `a+b+c` into a script chain.
    pub fn from_names(names: &str, seed: u64) -> Result<Self, BackendError> {
        let scripts = names
            .split('+')
            .map(Script::from_name)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(scripts, seed))
    }

    pub fn scripts(&self) -> &[Script] {
        &self.scripts
    }

    pub fn reply(&self, request: &ChatRequest) -> String {
        let prompt = request.prompt_text();
        let seed = self.seed ^ stable_hash(prompt.as_bytes());
        match self.scripts.iter().find(|s| s.handles(request.tag)) {
            Some(s) => s.respond(request.tag, &prompt, seed),
            None => default_reply(request.tag, &prompt),
        }
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let text = self.reply(request);
        let prompt_chars: String = request
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect();
        Ok(ChatResponse {
            usage: Usage {
                prompt_tokens: estimate_tokens(&prompt_chars),
                completion_tokens: estimate_tokens(&text),
            },
            text,
            latency_ms: 0,
        })
    }
}

fn actor_reply(reason: &str, action: &str) -> String {
    format!("- Thinking: {reason}\n- Action: {action}")
}

fn default_reply(tag: OperatorTag, prompt: &str) -> String {
    match tag {
        OperatorTag::Actor => {
            let last = inline_field(prompt, "Available Actions")
                .and_then(|a| a.split(',').map(str::trim).rfind(|a| !a.is_empty()))
                .unwrap_or("hold");
            actor_reply("No rule applies; keeping the default action.", last)
        }
        OperatorTag::Critic if is_reflection(prompt) => format!("- Team Critique: {TEAM_CRITIQUE}"),
        OperatorTag::Critic => neutral_credits(prompt),
        OperatorTag::Grad => format!("- Language Gradient: {NO_CHANGE}"),
        OperatorTag::Agg => format!("- Aggregated Gradient: {NO_CHANGE}"),
        OperatorTag::Opt => format!("- Updated Policy:\n{}", prior_policy(prompt)),
    }
}

// ---- piston_expert ----

const PISTON_DOWN_REASON: &str = "The ball is close and I am raised, so I lower to clear its path.";
const PISTON_HOLD_REASON: &str = "Nothing to react to yet, so I keep my height.";

/// What an actor prompt reveals about one piston.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PistonFeatures {
    pub own_height: f64,
    /// Ball cell minus own index, when the ball is visible.
    pub ball_offset: Option<i64>,
}

static OWN_HEIGHT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"Your height: ([0-9.]+)\.").expect("valid regex"));
static BALL_SIDE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"ball is (\d+) cells? to your (right|left)").expect("valid regex")
});
static CELL_THRESHOLD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(\d+)(\s*cells?)").expect("valid regex"));

impl PistonFeatures {
    pub fn from_observation(obs: &str) -> Option<Self> {
        let own_height = OWN_HEIGHT.captures(obs)?[1].parse().ok()?;
        let ball_offset = if obs.contains("ball is directly above you") {
            Some(0)
        } else if let Some(c) = BALL_SIDE.captures(obs) {
            let d: i64 = c[1].parse().ok()?;
            Some(if &c[2] == "right" { d } else { -d })
        } else {
            None
        };
        Some(Self {
            own_height,
            ball_offset,
        })
    }
}

/// First integer followed by "cell"/"cells" in a policy text.
pub fn policy_threshold(policy: &str) -> Option<i64> {
    CELL_THRESHOLD.captures(policy)?[1].parse().ok()
}

/// The expert rule. Without a threshold the piston reacts to any visible ball
/// from one cell to its left onward; a threshold of `K` cells limits the
/// reaction to balls at most `DOWN_THRESHOLD_REACH - K` cells to its right.
pub fn piston_expert_decision(f: &PistonFeatures, threshold: Option<i64>) -> &'static str {
    let Some(d) = f.ball_offset else {
        return "hold";
    };
    let within = match threshold {
        Some(k) => d <= DOWN_THRESHOLD_REACH - k,
        None => true,
    };
    if d >= -1 && within && f.own_height > 0.0 {
        "down"
    } else {
        "hold"
    }
}

fn piston_actor(prompt: &str) -> String {
    let obs = section_after(prompt, "- Local Observation:", "- Available Actions:").unwrap_or("");
    let policy = section_after(prompt, "- Language Policy:", "- Local Observation:").unwrap_or("");
    let Some(features) = PistonFeatures::from_observation(obs) else {
        return actor_reply(PISTON_HOLD_REASON, "hold");
    };
    match piston_expert_decision(&features, policy_threshold(policy)) {
        "down" => actor_reply(PISTON_DOWN_REASON, "down"),
        _ => actor_reply(PISTON_HOLD_REASON, "hold"),
    }
}

// ---- kitchen_expert ----

const KITCHEN_MOVE_REASON: &str = "Heading for the next station in the soup cycle.";
const KITCHEN_INTERACT_REASON: &str = "I am at the station I need, so I use it.";
const KITCHEN_WAIT_REASON: &str = "The way is blocked right now, so I wait.";

const DIRS: [(&str, i64, i64); 4] = [
    ("north", -1, 0),
    ("south", 1, 0),
    ("east", 0, 1),
    ("west", 0, -1),
];

static COOK_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"You are cook (\d+), facing (\w+), holding (\w+)\.").expect("valid regex")
});
static VIEW_SIZE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"View \((\d+)x\d+").expect("valid regex"));

fn kitchen_actor(prompt: &str, seed: u64) -> String {
    let obs = section_after(prompt, "- Local Observation:", "- Available Actions:").unwrap_or("");
    match kitchen_decision(obs, seed) {
        Some(a @ "interact") => actor_reply(KITCHEN_INTERACT_REASON, a),
        Some(a) => actor_reply(KITCHEN_MOVE_REASON, a),
        None => actor_reply(KITCHEN_WAIT_REASON, "wait"),
    }
}

fn kitchen_decision(obs: &str, seed: u64) -> Option<&'static str> {
    let cook = COOK_LINE.captures(obs)?;
    let cook_id: usize = cook[1].parse().ok()?;
    let facing = cook.get(2)?.as_str();
    let holding = cook.get(3)?.as_str();
    let size: usize = VIEW_SIZE.captures(obs)?[1].parse().ok()?;
    let lines: Vec<&str> = obs.lines().collect();
    let header = lines.iter().position(|l| l.starts_with("View ("))?;
    let grid: Vec<Vec<char>> = lines
        .get(header + 1..header + 1 + size)?
        .iter()
        .map(|l| l.chars().collect())
        .collect();
    let pot_ready = obs.contains("soup ready");
    let pot_full = pot_ready || obs.contains("Pot: 3 onions");
    let targets: &[char] = match holding {
        "soup" => &['D'],
        "onion" if !pot_full => &['P'],
        "plate" if pot_ready => &['P'],
        "onion" | "plate" => &['X'],
        _ if pot_ready => &['S'],
        _ => &['O'],
    };
    let at = |r: i64, c: i64| -> char {
        if r < 0 || c < 0 {
            return ' ';
        }
        grid.get(r as usize)
            .and_then(|row| row.get(c as usize))
            .copied()
            .unwrap_or(' ')
    };
    let me = (size as i64 / 2, size as i64 / 2);
    // Rotate direction order by the seed so ties break reproducibly.
    let rot = (seed % 4) as usize;
    let dirs: Vec<(&'static str, i64, i64)> = (0..4).map(|k| DIRS[(k + rot) % 4]).collect();

    let facing_target = |pos: (i64, i64)| -> Option<&'static str> {
        dirs.iter()
            .find(|(_, dr, dc)| targets.contains(&at(pos.0 + dr, pos.1 + dc)))
            .map(|(name, _, _)| *name)
    };
    if let Some(dir) = facing_target(me) {
        let owned = DIRS
            .iter()
            .find(|(name, dr, dc)| *name == facing && targets.contains(&at(me.0 + dr, me.1 + dc)));
        return Some(if owned.is_some() { "interact" } else { dir });
    }

    // Breadth-first search over free floor; the other cook is an obstacle.
    let n = size as i64;
    let mut first: Vec<Option<&'static str>> = vec![None; (n * n) as usize];
    let mut seen = vec![false; (n * n) as usize];
    let idx = |p: (i64, i64)| (p.0 * n + p.1) as usize;
    let mut queue = VecDeque::from([me]);
    seen[idx(me)] = true;
    while let Some(p) = queue.pop_front() {
        for &(name, dr, dc) in &dirs {
            let q = (p.0 + dr, p.1 + dc);
            if q.0 < 0 || q.1 < 0 || q.0 >= n || q.1 >= n || seen[idx(q)] || at(q.0, q.1) != '.' {
                continue;
            }
            seen[idx(q)] = true;
            first[idx(q)] = if p == me { Some(name) } else { first[idx(p)] };
            if facing_target(q).is_some() {
                return first[idx(q)];
            }
            queue.push_back(q);
        }
    }
    // No free path: cook 0 holds its ground and cook 1 steps aside, so the
    // two never dodge into each other forever.
    if cook_id == 0 {
        return None;
    }
    dirs.iter()
        .find(|(_, dr, dc)| at(me.0 + dr, me.1 + dc) == '.')
        .map(|(name, _, _)| *name)
}

// ---- echo_critic ----

const BLOCKED_CREDIT: &str = "kept its piston above the one under the ball and blocked the ball, \
     stopping the team's progress toward the left wall. Negative contribution.";
const NEUTRAL_CREDIT: &str = "had no decisive effect on the outcome; neutral contribution.";
const TEAM_CRITIQUE: &str = "The team moved the ball with mixed efficiency over this trajectory; \
     every member should keep coordinating toward the shared goal.";

static HEIGHTS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"Piston heights: (.*?)\. Ball at x=").expect("valid regex"));
static HEIGHT_ITEM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"p(\d+)=([0-9.eE+-]+)").expect("valid regex"));
static BALL_CELL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\(cell (\d+)\)").expect("valid regex"));

/// Index of the piston blocking the ball in one global piston state, if any.
fn blocker_in(state: &str) -> Option<usize> {
    let heights_text = HEIGHTS.captures(state)?.get(1)?.as_str();
    let mut heights = Vec::new();
    for c in HEIGHT_ITEM.captures_iter(heights_text) {
        heights.push(c[2].parse::<f64>().ok()?);
    }
    let cell: usize = BALL_CELL.captures(state)?[1].parse().ok()?;
    (cell > 0 && cell < heights.len() && heights[cell - 1] > heights[cell] + 1e-9).then(|| cell - 1)
}

fn credit_section(agent: usize, body: &str) -> String {
    format!("- Credit Assignment [Agent {agent}]: Agent {agent} {body}")
}

fn is_reflection(prompt: &str) -> bool {
    prompt.contains("- Team Critique:")
}

fn team_size(prompt: &str) -> usize {
    inline_field(prompt, "Team Size")
        .and_then(|v| v.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or(1)
}

fn neutral_credits(prompt: &str) -> String {
    (0..team_size(prompt))
        .map(|i| credit_section(i, NEUTRAL_CREDIT))
        .collect::<Vec<_>>()
        .join("\n")
}

static FOCUS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"Focus on Agent (\d+)\.").expect("valid regex"));

/// Blames the piston that blocked the ball in the most listed states (ties go
/// to the piston nearer the start); everyone else is neutral.
fn echo_critic(prompt: &str) -> String {
    if is_reflection(prompt) {
        return format!("- Team Critique: {TEAM_CRITIQUE}");
    }
    let n = team_size(prompt);
    let mut counts = vec![0usize; n];
    for line in prompt.lines() {
        let state = line
            .trim_start()
            .strip_prefix("State: ")
            .or_else(|| line.strip_prefix("Final State: "));
        if let Some(b) = state.and_then(blocker_in).filter(|&b| b < n) {
            counts[b] += 1;
        }
    }
    let blamed = counts
        .iter()
        .enumerate()
        .filter(|(_, c)| **c > 0)
        .max_by_key(|(i, c)| (**c, *i))
        .map(|(i, _)| i);
    let section = |i: usize| {
        if Some(i) == blamed {
            credit_section(i, BLOCKED_CREDIT)
        } else {
            credit_section(i, NEUTRAL_CREDIT)
        }
    };
    let focus = FOCUS
        .captures(prompt)
        .and_then(|c| c[1].parse::<usize>().ok())
        .filter(|&f| f < n);
    match focus {
        Some(f) => section(f),
        None => (0..n).map(section).collect::<Vec<_>>().join("\n"),
    }
}

// ---- threshold_optimizer ----

fn prior_policy(prompt: &str) -> &str {
    section_after(prompt, "- Prior Policy:", "\nInstruction:")
        .unwrap_or("")
        .trim()
}

fn threshold_gradient(prompt: &str) -> String {
    let credit = section_after(prompt, "- Language Credits:", "- Prior Policy:").unwrap_or("");
    if credit.to_lowercase().contains("blocked the ball") {
        format!("- Language Gradient: {LOWER_THRESHOLD} by one cell.")
    } else {
        format!("- Language Gradient: {NO_CHANGE}")
    }
}

fn threshold_synthesis(prompt: &str) -> String {
    let grads = prompt
        .split_once("\n- Language Gradients")
        .and_then(|(_, rest)| rest.split_once('\n'))
        .map_or("", |(_, rest)| {
            rest.split("\n\nInstruction:").next().unwrap_or(rest)
        });
    if grads.contains(LOWER_THRESHOLD) {
        format!("- Aggregated Gradient: {LOWER_THRESHOLD} by one cell.")
    } else {
        format!("- Aggregated Gradient: {NO_CHANGE}")
    }
}

/// Lowers the first `<n> cell(s)` number in the policy by one, floored at 0.
pub fn lower_threshold(policy: &str) -> String {
    CELL_THRESHOLD
        .replacen(policy, 1, |c: &regex::Captures<'_>| {
            let k: u64 = c[1].parse().unwrap_or(0);
            let unit = if k.saturating_sub(1) == 1 {
                c[2].trim_end_matches('s').to_string()
            } else {
                plural(&c[2])
            };
            format!("{}{unit}", k.saturating_sub(1))
        })
        .into_owned()
}

fn plural(unit: &str) -> String {
    if unit.ends_with('s') {
        unit.to_string()
    } else {
        format!("{unit}s")
    }
}

fn threshold_update(prompt: &str) -> String {
    let aggregated =
        section_after(prompt, "- Aggregated Gradients:", "- Prior Policy:").unwrap_or("");
    let prior = prior_policy(prompt);
    let updated = if aggregated.contains(LOWER_THRESHOLD) {
        lower_threshold(prior)
    } else {
        prior.to_string()
    };
    format!("- Updated Policy:\n{updated}")
}
