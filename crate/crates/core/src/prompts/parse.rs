use std::sync::LazyLock;

use regex::Regex;

use super::{ParseError, GRADIENT_LABEL, REFLECTION_LABEL, SYNTHESIS_LABEL, UPDATED_POLICY_LABEL};
use crate::types::{AgentId, Polarity};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedActorOutput {
    pub thinking: String,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCriticOutput {
    /// One `(text, polarity)` per agent, indexed by agent id.
    pub sections: Vec<(String, Polarity)>,
}

impl ParsedCriticOutput {
    pub fn section(&self, agent: AgentId) -> Option<&(String, Polarity)> {
        self.sections.get(agent.0)
    }
}

/// Strips list bullets and markdown emphasis from the start of a line.
fn strip_decoration(line: &str) -> &str {
    line.trim_start_matches(|c: char| {
        c.is_whitespace() || matches!(c, '-' | '*' | '#' | '>' | '•' | '_')
    })
}

/// The remainder of `line` after `label` and a colon, when the line is such a
/// labelled line. Matching is case-insensitive and tolerates emphasis around
/// the label.
fn after_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let body = strip_decoration(line);
    let head = body.get(..label.len())?;
    if !head.eq_ignore_ascii_case(label) {
        return None;
    }
    let rest = body[label.len()..].trim_start_matches(['*', '_', ' ']);
    rest.strip_prefix(':')
        .map(|r| r.trim_start_matches(['*', '_']).trim())
}

fn find_vocabulary_item<'v>(text: &str, vocabulary: &[&'v str]) -> Option<&'v str> {
    let lower = text.to_lowercase();
    vocabulary
        .iter()
        .filter_map(|v| lower.find(&v.to_lowercase()).map(|pos| (*v, pos)))
        // Longest match first, then earliest position.
        .min_by(|(a, pa), (b, pb)| b.len().cmp(&a.len()).then(pa.cmp(pb)))
        .map(|(v, _)| v)
}

/// Extracts the chosen action from an actor reply. The last `Action:` line
/// wins; its value must contain one of `vocabulary` (case-insensitively).
pub fn parse_actor(text: &str, vocabulary: &[&str]) -> Result<ParsedActorOutput, ParseError> {
    let lines: Vec<&str> = text.lines().collect();
    let (idx, value) = lines
        .iter()
        .enumerate()
        .rev()
        .find_map(|(i, l)| after_label(l, "action").map(|v| (i, v)))
        .ok_or(ParseError::NoActionLine)?;
    let action = find_vocabulary_item(value, vocabulary)
        .ok_or_else(|| ParseError::UnknownAction(value.to_string()))?;
    let mut thinking: Vec<&str> = lines[..idx].to_vec();
    if let Some(pos) = thinking
        .iter()
        .position(|l| after_label(l, "thinking").is_some())
    {
        let first = after_label(thinking[pos], "thinking").unwrap_or_default();
        thinking = std::iter::once(first)
            .chain(thinking[pos + 1..].iter().copied())
            .collect();
    }
    Ok(ParsedActorOutput {
        thinking: thinking.join("\n").trim().to_string(),
        action: action.to_string(),
    })
}

/// Keyword lists used to summarize a credit text as a [`Polarity`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolarityLexicon {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    pub neutral: Vec<String>,
}

impl Default for PolarityLexicon {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            positive: v(&[
                "positive",
                "helped",
                "helpful",
                "enabled",
                "cleared",
                "succeeded",
                "success",
                "delivered",
                "effective",
                "good",
            ]),
            negative: v(&[
                "negative",
                "blocked",
                "blocking",
                "failed",
                "failure",
                "hindered",
                "harmful",
                "mistake",
                "wasted",
                "delayed",
                "obstructed",
                "poor",
            ]),
            neutral: v(&[
                "neutral",
                "no decisive",
                "no significant",
                "no notable",
                "negligible",
            ]),
        }
    }
}

impl PolarityLexicon {
    pub fn classify(&self, text: &str) -> Polarity {
        let lower = text.to_lowercase();
        let any = |words: &[String]| words.iter().any(|w| lower.contains(w.as_str()));
        match (any(&self.positive), any(&self.negative)) {
            (true, true) => Polarity::Mixed,
            (true, false) => Polarity::Positive,
            (false, true) => Polarity::Negative,
            (false, false) if any(&self.neutral) => Polarity::Neutral,
            (false, false) => Polarity::Mixed,
        }
    }
}

static CREDIT_HEADER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)credit\s+assignment\s*\[\s*agent\s*(\d+)\s*\]\s*[*_]*\s*:?")
        .expect("valid regex")
});

pub fn parse_critic(text: &str, n_agents: usize) -> Result<ParsedCriticOutput, ParseError> {
    parse_critic_with(text, n_agents, &PolarityLexicon::default())
}

/// Splits a critic reply into per-agent sections. Headers naming agents
/// outside `0..n_agents` are ignored; the first header per agent wins; agents
/// without a section get empty neutral credit.
pub fn parse_critic_with(
    text: &str,
    n_agents: usize,
    lexicon: &PolarityLexicon,
) -> Result<ParsedCriticOutput, ParseError> {
    let headers: Vec<(usize, usize, Option<usize>)> = CREDIT_HEADER
        .captures_iter(text)
        .map(|c| {
            let m = c.get(0).expect("whole match");
            let id = c[1].parse::<usize>().ok().filter(|&id| id < n_agents);
            (m.start(), m.end(), id)
        })
        .collect();
    if !headers.iter().any(|h| h.2.is_some()) {
        return Err(ParseError::ZeroSections);
    }
    let mut sections: Vec<Option<(String, Polarity)>> = vec![None; n_agents];
    for (k, &(_, end, id)) in headers.iter().enumerate() {
        let Some(id) = id else { continue };
        if sections[id].is_some() {
            continue;
        }
        let stop = headers.get(k + 1).map_or(text.len(), |h| h.0);
        let body = clean_section(&text[end..stop]);
        let polarity = lexicon.classify(&body);
        sections[id] = Some((body, polarity));
    }
    Ok(ParsedCriticOutput {
        sections: sections
            .into_iter()
            .map(|s| s.unwrap_or_else(|| (String::new(), Polarity::Neutral)))
            .collect(),
    })
}

/// Trims whitespace and dangling list markers left between sections.
fn clean_section(body: &str) -> String {
    let trimmed = body.trim();
    let trimmed = trimmed.trim_start_matches(['*', '_']).trim_start();
    let trimmed =
        trimmed.trim_end_matches(|c: char| c.is_whitespace() || matches!(c, '-' | '*' | '#' | '•'));
    trimmed.to_string()
}

/// Everything after the first `label:` line, up to the end of the reply.
fn labelled_section(text: &str, label: &'static str) -> Result<String, ParseError> {
    let lines: Vec<&str> = text.lines().collect();
    let idx = lines
        .iter()
        .position(|l| after_label(l, label).is_some())
        .ok_or(ParseError::MissingSection(label))?;
    let first = after_label(lines[idx], label).unwrap_or_default();
    let body: Vec<&str> = std::iter::once(first)
        .chain(lines[idx + 1..].iter().copied())
        .collect();
    let body = body.join("\n").trim().to_string();
    if body.is_empty() {
        return Err(ParseError::MissingSection(label));
    }
    Ok(body)
}

pub fn parse_reflection(text: &str) -> Result<String, ParseError> {
    labelled_section(text, REFLECTION_LABEL)
}

pub fn parse_gradient(text: &str) -> Result<String, ParseError> {
    labelled_section(text, GRADIENT_LABEL)
}

pub fn parse_synthesis(text: &str) -> Result<String, ParseError> {
    labelled_section(text, SYNTHESIS_LABEL)
}

pub fn parse_optimizer(text: &str) -> Result<String, ParseError> {
    labelled_section(text, UPDATED_POLICY_LABEL)
}
