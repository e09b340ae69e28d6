//! Decentralized experience collection.
//!
//! Each agent acts only from its own policy text and local observation. All
//! agents of a step are queried concurrently from the same pre-step state and
//! their actions are applied together.

use rayon::prelude::*;
use tracing::{debug, warn};

use crate::backend::{ChatBackend, Decoding, OperatorTag};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::prompts::{parse_actor, render_actor};
use crate::types::{
    stable_hash, Action, LanguagePolicy, ParseFailure, Step, TextObservation, Trajectory,
};

/// Knobs shared by every episode in a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    pub decoding: Decoding,
    /// Run episodes and per-step actor calls on the thread pool.
    pub concurrent: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            decoding: Decoding::default_for(OperatorTag::Actor),
            concurrent: true,
        }
    }
}

fn format_reminder(vocabulary: &[&str]) -> String {
    format!(
        "Your reply did not name a usable action. Answer again in the output format, ending with a line \"- Action: <one of {}>\".",
        vocabulary.join(", ")
    )
}

/// Queries the actor once, re-prompts once on a parse failure, and falls back
/// to `fallback` if the second reply is unusable too.
pub fn sample_action(
    backend: &dyn ChatBackend,
    policy: &LanguagePolicy,
    obs: &TextObservation,
    vocabulary: &[&str],
    fallback: &str,
    decoding: Decoding,
) -> Result<Action> {
    let request = render_actor(policy, obs, vocabulary, decoding)?;
    let first = backend.complete(&request)?;
    let err = match parse_actor(&first.text, vocabulary) {
        Ok(p) => return Ok(chosen(policy, p.action, first.text)),
        Err(e) => e,
    };
    debug!(agent = %policy.agent(), "actor reply unparsable ({err}); re-prompting");
    let retry = request.reprompt(&first.text, &format_reminder(vocabulary));
    let second = backend.complete(&retry)?;
    match parse_actor(&second.text, vocabulary) {
        Ok(p) => Ok(chosen(policy, p.action, second.text)),
        Err(err) => {
            warn!(agent = %policy.agent(), "actor reply unparsable twice ({err}); using '{fallback}'");
            Ok(Action {
                agent: policy.agent(),
                name: fallback.to_string(),
                raw_output: second.text,
                parse_failure: Some(ParseFailure {
                    attempts: 2,
                    reason: err.to_string(),
                }),
            })
        }
    }
}

fn chosen(policy: &LanguagePolicy, name: String, raw: String) -> Action {
    Action {
        agent: policy.agent(),
        name,
        raw_output: raw,
        parse_failure: None,
    }
}

/// `env-seed-hash`, where the hash covers every agent's policy version and text.
pub fn trajectory_id(env: &Environment, policies: &[LanguagePolicy], seed: u64) -> String {
    let mut key = Vec::new();
    for p in policies {
        key.extend_from_slice(format!("{}:{}:", p.agent(), p.version()).as_bytes());
        key.extend_from_slice(p.text().as_bytes());
        key.push(0);
    }
    format!("{}-{seed}-{:016x}", env.name(), stable_hash(&key))
}

pub fn run_episode(
    env: &Environment,
    policies: &[LanguagePolicy],
    backend: &dyn ChatBackend,
    seed: u64,
    options: RolloutOptions,
) -> Result<Trajectory> {
    let n = env.n_agents();
    if policies.len() != n {
        return Err(Error::invalid(format!(
            "{} needs {n} policies, got {}",
            env.name(),
            policies.len()
        )));
    }
    if let Some((i, p)) = policies.iter().enumerate().find(|(i, p)| p.agent().0 != *i) {
        return Err(Error::invalid(format!(
            "policy {i} belongs to agent {}",
            p.agent()
        )));
    }

    let (mut state, mut obs) = env.reset(seed);
    let mut trajectory = Trajectory {
        id: trajectory_id(env, policies, seed),
        env_name: env.name().to_string(),
        seed,
        steps: Vec::new(),
        final_observations: Vec::new(),
        final_global_text: String::new(),
    };
    let fallback = env.fallback_action();
    let abort = |trajectory: Trajectory, source: Error| Error::Episode {
        seed,
        partial: Box::new(trajectory),
        source: Box::new(source),
    };

    for t in 0..env.horizon() {
        let global_text = env.global_textualize(&state);
        let act = |i: usize| -> Result<Action> {
            let vocab = env.action_vocabulary(policies[i].agent())?;
            sample_action(
                backend,
                &policies[i],
                &obs[i],
                vocab,
                fallback,
                options.decoding,
            )
        };
        let joint: Result<Vec<Action>> = if options.concurrent {
            (0..n).into_par_iter().map(act).collect()
        } else {
            (0..n).map(act).collect()
        };
        let joint = match joint {
            Ok(j) => j,
            Err(e) => return Err(abort(trajectory, e)),
        };
        let outcome = match env.step(&state, &joint) {
            Ok(o) => o,
            Err(e) => return Err(abort(trajectory, e)),
        };
        trajectory.steps.push(Step {
            index: t,
            observations: std::mem::replace(&mut obs, outcome.observations),
            joint_action: joint,
            reward: outcome.reward,
            global_text,
        });
        state = outcome.state;
        if outcome.done {
            break;
        }
    }
    trajectory.final_global_text = env.global_textualize(&state);
    trajectory.final_observations = obs;
    Ok(trajectory)
}

/// Runs `k` episodes with seeds `base_seed..base_seed + k`, returned in seed
/// order. The first failure fails the batch; finished episodes ride along in
/// the error.
pub fn collect_trajectories(
    env: &Environment,
    policies: &[LanguagePolicy],
    backend: &dyn ChatBackend,
    k: usize,
    base_seed: u64,
    options: RolloutOptions,
) -> Result<Vec<Trajectory>> {
    if k == 0 {
        return Err(Error::invalid("rollout batch size must be at least 1"));
    }
    let seeds: Vec<u64> = (0..k as u64).map(|i| base_seed + i).collect();
    let run = |&seed: &u64| run_episode(env, policies, backend, seed, options);
    let results: Vec<Result<Trajectory>> = if options.concurrent {
        seeds.par_iter().map(run).collect()
    } else {
        seeds.iter().map(run).collect()
    };
    let mut completed = Vec::with_capacity(k);
    let mut failure = None;
    for r in results {
        match r {
            Ok(t) => completed.push(t),
            Err(e) if failure.is_none() => failure = Some(e),
            Err(_) => {}
        }
    }
    match failure {
        None => Ok(completed),
        Some(e) => Err(Error::Batch {
            completed,
            source: Box::new(e),
        }),
    }
}
