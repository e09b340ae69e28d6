//! The training loop and its run directory.
//!
//! ```text
//! <run_dir>/
//!   config.toml          resolved config snapshot
//!   policies.jsonl       one record per (agent, version)
//!   baseline.csv         evaluation of the initial policies (iteration 0)
//!   metrics.csv          one row per completed training iteration
//!   progress.json        {"completed_iterations": n}, the commit point
//!   iterations/0001/     trajectories, credits, gradients, syntheses, eval
//! ```
//!
//! An iteration only counts once `progress.json` says so. Anything written
//! past that point is discarded on resume, then the loop picks up where it
//! stopped.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::info;

use crate::backend::{ChatBackend, Metered, OperatorTag, UsageLedger};
use crate::config::RunConfig;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::learning::train_iteration;
use crate::metrics::return_stats;
use crate::rollout::{collect_trajectories, RolloutOptions};
use crate::store::{
    append_jsonl, load_trajectories, read_jsonl, save_trajectories, write_atomic, write_jsonl,
};
use crate::types::{
    AgentId, Clock, LanguageCredit, LanguageGradient, LanguagePolicy, PolicyRevision, Trajectory,
};

/// One row of `metrics.csv` / `baseline.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub tokens_by_tag: String,
}

/// One line of `policies.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub agent: AgentId,
    pub version: u32,
    pub text: String,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub agent: AgentId,
    pub text: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub completed_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub trajectories: Vec<Trajectory>,
    pub mean_return: f64,
    pub std_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub baseline: MetricsRow,
    pub metrics: Vec<MetricsRow>,
    pub policies: Vec<LanguagePolicy>,
}

/// Paths inside a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn policies(&self) -> PathBuf {
        self.root.join("policies.jsonl")
    }

    pub fn baseline(&self) -> PathBuf {
        self.root.join("baseline.csv")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn progress(&self) -> PathBuf {
        self.root.join("progress.json")
    }

    pub fn iterations(&self) -> PathBuf {
        self.root.join("iterations")
    }

    pub fn iteration(&self, i: usize) -> PathBuf {
        self.iterations().join(format!("{i:04}"))
    }

    pub fn exists(&self) -> bool {
        self.config().is_file()
    }

    pub fn load_config(&self) -> Result<RunConfig> {
        if !self.exists() {
            return Err(Error::Config(format!(
                "{} is not a run directory",
                self.root.display()
            )));
        }
        RunConfig::load(&self.config(), &[])
    }

    pub fn load_progress(&self) -> Result<Progress> {
        let path = self.progress();
        if !path.exists() {
            return Ok(Progress::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path,
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn load_metrics(&self) -> Result<Vec<MetricsRow>> {
        read_metrics(&self.metrics())
    }

    pub fn load_policy_records(&self) -> Result<Vec<PolicyRecord>> {
        read_jsonl(self.policies())
    }

    /// Latest policies with full history, restricted to versions `<= max_version`.
    pub fn load_policies(&self, n_agents: usize, max_version: u32) -> Result<Vec<LanguagePolicy>> {
        let records = self.load_policy_records()?;
        (0..n_agents)
            .map(|i| {
                let mut history: Vec<PolicyRevision> = records
                    .iter()
                    .filter(|r| r.agent.0 == i && r.version <= max_version)
                    .map(|r| PolicyRevision {
                        version: r.version,
                        text: r.text.clone(),
                        timestamp_ms: r.timestamp_ms,
                    })
                    .collect();
                history.sort_by_key(|r| r.version);
                LanguagePolicy::from_history(AgentId(i), history)
            })
            .collect()
    }

    pub fn load_credits(&self, iteration: usize) -> Result<Vec<LanguageCredit>> {
        read_jsonl(self.iteration(iteration).join("credits.jsonl"))
    }

    pub fn load_gradients(&self, iteration: usize) -> Result<Vec<LanguageGradient>> {
        read_jsonl(self.iteration(iteration).join("gradients.jsonl"))
    }

    pub fn load_syntheses(&self, iteration: usize) -> Result<Vec<SynthesisRecord>> {
        read_jsonl(self.iteration(iteration).join("syntheses.jsonl"))
    }

    pub fn load_training_trajectories(&self, iteration: usize) -> Result<Vec<Trajectory>> {
        load_trajectories(self.iteration(iteration).join("trajectories.jsonl"))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Corrupt {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["iteration", "mean_return", "std_return", "tokens_by_tag"])
            .map_err(|e| csv_error(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(
        path,
        &String::from_utf8(bytes).expect("csv output is utf-8"),
    )
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Corrupt {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Rolls out `episodes` evaluation episodes from `base_seed` and summarizes
/// their returns.
pub fn evaluate(
    env: &Environment,
    policies: &[LanguagePolicy],
    backend: &dyn ChatBackend,
    base_seed: u64,
    episodes: usize,
    discount: f64,
    options: RolloutOptions,
) -> Result<Evaluation> {
    let trajectories = collect_trajectories(env, policies, backend, episodes, base_seed, options)?;
    let (mean_return, std_return) = return_stats(&trajectories, discount)?;
    Ok(Evaluation {
        trajectories,
        mean_return,
        std_return,
    })
}

fn rollout_options(config: &RunConfig) -> RolloutOptions {
    RolloutOptions {
        decoding: config.sampling.decoding(OperatorTag::Actor),
        concurrent: config.learning.concurrent,
    }
}

/// Evaluates `policies` on the run's held-out seeds.
pub fn evaluate_config(
    config: &RunConfig,
    policies: &[LanguagePolicy],
    backend: &dyn ChatBackend,
    episodes: usize,
) -> Result<Evaluation> {
    let env = config.environment()?;
    evaluate(
        &env,
        policies,
        backend,
        config.eval_seed(),
        episodes,
        config.discount,
        rollout_options(config),
    )
}

fn policy_records(policies: &[LanguagePolicy]) -> Vec<PolicyRecord> {
    policies
        .iter()
        .map(|p| PolicyRecord {
            agent: p.agent(),
            version: p.version(),
            text: p.text().to_string(),
            timestamp_ms: p.current().timestamp_ms,
        })
        .collect()
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Drops every artifact that belongs to an iteration past `completed`.
fn truncate_to(dir: &RunDir, completed: usize) -> Result<()> {
    if dir.policies().exists() {
        let kept: Vec<PolicyRecord> = dir
            .load_policy_records()?
            .into_iter()
            .filter(|r| r.version as usize <= completed)
            .collect();
        write_jsonl(dir.policies(), &kept)?;
    }
    if dir.metrics().exists() {
        let kept: Vec<MetricsRow> = dir
            .load_metrics()?
            .into_iter()
            .filter(|r| r.iteration <= completed)
            .collect();
        write_metrics(&dir.metrics(), &kept)?;
    }
    if dir.iterations().is_dir() {
        let entries = fs::read_dir(dir.iterations()).map_err(|e| Error::io(dir.iterations(), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir.iterations(), e))?;
            let stale = entry
                .file_name()
                .to_str()
                .and_then(|n| n.parse::<usize>().ok())
                .is_none_or(|i| i > completed);
            if stale {
                let p = entry.path();
                fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    Ok(())
}

/// Runs (or resumes) `config.iterations` training iterations in
/// `config.run_dir`. `on_row` sees the baseline row and every new metrics row.
pub fn train(
    config: &RunConfig,
    backend: &dyn ChatBackend,
    clock: &dyn Clock,
    on_row: &mut dyn FnMut(&MetricsRow),
) -> Result<RunSummary> {
    config.validate()?;
    let env = config.environment()?;
    let dir = RunDir::new(&config.run_dir);
    ensure_dir(dir.root())?;

    let progress = if dir.exists() {
        let stored = dir.load_config()?;
        if !stored.same_run_as(config) {
            return Err(Error::Config(format!(
                "{} already holds a run with a different configuration",
                dir.root().display()
            )));
        }
        dir.load_progress()?
    } else {
        Progress::default()
    };
    let mut snapshot = config.clone();
    snapshot.iterations = config.iterations.max(progress.completed_iterations);
    write_atomic(dir.config(), &snapshot.to_toml())?;
    truncate_to(&dir, progress.completed_iterations)?;

    let metered = Metered::new(backend);
    let options = rollout_options(config);
    let settings = config.iteration_settings();

    let mut policies = if progress.completed_iterations == 0 && !dir.policies().exists() {
        let initial = config.initial_policies(clock)?;
        write_jsonl(dir.policies(), &policy_records(&initial))?;
        initial
    } else {
        dir.load_policies(config.n_agents, progress.completed_iterations as u32)?
    };

    let baseline = if dir.baseline().exists() {
        read_metrics(&dir.baseline())?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Corrupt {
                path: dir.baseline(),
                line: 1,
                message: "no baseline row".into(),
            })?
    } else {
        let before = metered.snapshot();
        let initial = dir.load_policies(config.n_agents, 0)?;
        let eval = evaluate(
            &env,
            &initial,
            &metered,
            config.eval_seed(),
            config.eval_episodes,
            config.discount,
            options,
        )?;
        let row = MetricsRow {
            iteration: 0,
            mean_return: eval.mean_return,
            std_return: eval.std_return,
            tokens_by_tag: metered.snapshot().since(&before).tokens_by_tag(),
        };
        write_metrics(&dir.baseline(), std::slice::from_ref(&row))?;
        row
    };
    on_row(&baseline);

    let mut metrics = if dir.metrics().exists() {
        dir.load_metrics()?
    } else {
        write_metrics(&dir.metrics(), &[])?;
        Vec::new()
    };

    for iteration in progress.completed_iterations + 1..=config.iterations {
        let wrap = |source: Error| Error::Iteration {
            iteration,
            source: Box::new(source),
        };
        let before = metered.snapshot();
        let (row, updated) = run_iteration(
            config, &env, &dir, &metered, &policies, iteration, options, &settings, clock, &before,
        )
        .map_err(wrap)?;
        metrics.push(row.clone());
        write_metrics(&dir.metrics(), &metrics).map_err(wrap)?;
        let done = Progress {
            completed_iterations: iteration,
        };
        write_atomic(
            dir.progress(),
            &serde_json::to_string(&done).expect("progress serializes"),
        )
        .map_err(wrap)?;
        info!(
            iteration,
            mean_return = row.mean_return,
            "iteration complete"
        );
        on_row(&row);
        policies = updated;
    }

    Ok(RunSummary {
        baseline,
        metrics,
        policies,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_iteration(
    config: &RunConfig,
    env: &Environment,
    dir: &RunDir,
    backend: &Metered<&dyn ChatBackend>,
    policies: &[LanguagePolicy],
    iteration: usize,
    options: RolloutOptions,
    settings: &crate::learning::IterationSettings,
    clock: &dyn Clock,
    before: &UsageLedger,
) -> Result<(MetricsRow, Vec<LanguagePolicy>)> {
    let it_dir = dir.iteration(iteration);
    if it_dir.exists() {
        fs::remove_dir_all(&it_dir).map_err(|e| Error::io(&it_dir, e))?;
    }
    ensure_dir(&it_dir)?;

    let trajectories = collect_trajectories(
        env,
        policies,
        backend,
        config.rollouts_per_iteration,
        config.training_seed(iteration),
        options,
    )?;
    save_trajectories(&trajectories, it_dir.join("trajectories.jsonl"))?;

    let outcome = train_iteration(backend, policies, &trajectories, settings, clock)?;
    let credits: Vec<&LanguageCredit> = outcome.credits.iter().flatten().collect();
    write_jsonl(it_dir.join("credits.jsonl"), &credits)?;
    let gradients: Vec<&LanguageGradient> = outcome.gradients.iter().flatten().collect();
    write_jsonl(it_dir.join("gradients.jsonl"), &gradients)?;
    let syntheses: Vec<SynthesisRecord> = outcome
        .syntheses
        .iter()
        .enumerate()
        .map(|(i, text)| SynthesisRecord {
            agent: AgentId(i),
            text: text.clone(),
        })
        .collect();
    write_jsonl(it_dir.join("syntheses.jsonl"), &syntheses)?;

    let eval = evaluate(
        env,
        &outcome.policies,
        backend,
        config.eval_seed(),
        config.eval_episodes,
        config.discount,
        options,
    )?;
    save_trajectories(&eval.trajectories, it_dir.join("eval.jsonl"))?;
    append_jsonl(dir.policies(), &policy_records(&outcome.policies))?;

    let row = MetricsRow {
        iteration,
        mean_return: eval.mean_return,
        std_return: eval.std_return,
        tokens_by_tag: backend.snapshot().since(before).tokens_by_tag(),
    };
    Ok((row, outcome.policies))
}
