//! Prompt templates for the five LLM operators and parsers for their replies.
//!
//! Template texts live in `templates/*.txt` as `[system]` / `[user]` pairs
//! with `{{name}}` placeholders. Rendering is a single pass: bound values are
//! inserted verbatim and never re-scanned for placeholders.

mod parse;
mod render;

use std::collections::BTreeMap;

use thiserror::Error;

pub use parse::{
    parse_actor, parse_critic, parse_critic_with, parse_gradient, parse_optimizer,
    parse_reflection, parse_synthesis, ParsedActorOutput, ParsedCriticOutput, PolarityLexicon,
};
pub use render::{
    elision_plan, own_excerpt, render_actor, render_aggregator, render_critic, render_gradient,
    render_optimizer, render_reflection, serialize_steps, CriticPromptOptions,
    ELISION_CHARS_PER_TOKEN,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no 'Action:' line in the reply")]
    NoActionLine,
    #[error("action line '{0}' names no available action")]
    UnknownAction(String),
    #[error("no 'Credit Assignment [Agent i]' section in the reply")]
    ZeroSections,
    #[error("missing '{0}:' section")]
    MissingSection(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateKind {
    Actor,
    Critic,
    Reflection,
    GradEstimator,
    Aggregator,
    Optimizer,
}

/// Labels a template's output section headings.
pub const ACTOR_OUTPUT: &[&str] = &["Thinking", "Action"];
pub const CRITIC_OUTPUT: &[&str] = &["Credit Assignment [Agent i]"];
pub const REFLECTION_LABEL: &str = "Team Critique";
pub const GRADIENT_LABEL: &str = "Language Gradient";
pub const SYNTHESIS_LABEL: &str = "Aggregated Gradient";
pub const UPDATED_POLICY_LABEL: &str = "Updated Policy";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub kind: TemplateKind,
    pub system_text: &'static str,
    pub user_text: &'static str,
    pub output_schema: &'static [&'static str],
}

macro_rules! template_asset {
    ($file:literal) => {
        include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/templates/", $file))
    };
}

fn split_asset(asset: &'static str) -> (&'static str, &'static str) {
    let body = asset
        .strip_prefix("[system]\n")
        .expect("template asset starts with [system]");
    let (system, user) = body
        .split_once("\n[user]\n")
        .expect("template asset has a [user] part");
    (system, user.strip_suffix('\n').unwrap_or(user))
}

impl Template {
    pub fn get(kind: TemplateKind) -> Template {
        let (asset, output_schema): (&'static str, &'static [&'static str]) = match kind {
            TemplateKind::Actor => (template_asset!("actor.txt"), ACTOR_OUTPUT),
            TemplateKind::Critic => (template_asset!("critic.txt"), CRITIC_OUTPUT),
            TemplateKind::Reflection => (template_asset!("reflection.txt"), &[REFLECTION_LABEL]),
            TemplateKind::GradEstimator => (template_asset!("gradient.txt"), &[GRADIENT_LABEL]),
            TemplateKind::Aggregator => (template_asset!("aggregator.txt"), &[SYNTHESIS_LABEL]),
            TemplateKind::Optimizer => (template_asset!("optimizer.txt"), &[UPDATED_POLICY_LABEL]),
        };
        let (system_text, user_text) = split_asset(asset);
        Template {
            kind,
            system_text,
            user_text,
            output_schema,
        }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        for text in [self.system_text, self.user_text] {
            let mut rest = text;
            while let Some(start) = rest.find("{{") {
                let after = &rest[start + 2..];
                let Some(end) = after.find("}}") else { break };
                let name = &after[..end];
                if !names.contains(&name) {
                    names.push(name);
                }
                rest = &after[end + 2..];
            }
        }
        names
    }

    /// Renders `(system, user)`; every placeholder must be bound.
    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<(String, String)> {
        Ok((
            fill(self.system_text, bindings)?,
            fill(self.user_text, bindings)?,
        ))
    }
}

fn fill(text: &str, bindings: &BTreeMap<&str, String>) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| Error::invalid("unterminated placeholder in template"))?;
        let name = &after[..end];
        let value = bindings
            .get(name)
            .ok_or_else(|| Error::invalid(format!("template placeholder '{name}' is not bound")))?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Text between a line equal to `header` and the next line starting with
/// `until` (or the end of the prompt). Used by the scripted backend to read
/// prompts back with the same grammar the templates emit.
pub fn section_after<'a>(prompt: &'a str, header: &str, until: &str) -> Option<&'a str> {
    let marker = format!("{header}\n");
    let start = if prompt.starts_with(&marker) {
        marker.len()
    } else {
        prompt.find(&format!("\n{marker}"))? + marker.len() + 1
    };
    let body = &prompt[start..];
    let end = body.find(&format!("\n{until}")).unwrap_or(body.len());
    Some(&body[..end])
}

/// Value of a single-line `- Label: value` input.
pub fn inline_field<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    let marker = format!("- {label}: ");
    prompt
        .lines()
        .find_map(|line| line.strip_prefix(marker.as_str()))
}
