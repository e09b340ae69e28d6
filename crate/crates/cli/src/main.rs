use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use parley::backend::{build_backend, ChatBackend};
use parley::run::{evaluate_config, read_metrics, MetricsRow, RunDir};
use parley::store::{save_trajectories, write_atomic};
use parley::types::SystemClock;
use parley::{Error, RunConfig};
use similar::TextDiff;

#[derive(Parser)]
#[command(
    name = "parley",
    version,
    about = "Train and inspect language-policy agent teams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) a run described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. `--set backend.kind=scripted`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        /// Run directory; replaces `run_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll out episodes without learning and store them in the run directory.
    Rollout {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the latest policies of a run on its held-out seeds.
    Eval {
        run_dir: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Show credit, gradients, synthesis and the policy diff for one agent.
    Inspect {
        run_dir: PathBuf,
        #[arg(long)]
        iteration: usize,
        #[arg(long)]
        agent: usize,
    },
    /// Draw learning curves for one or more runs as SVG with a CSV sidecar.
    Plot {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit 1 for anything the user can fix by changing input, 2 otherwise.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Invalid(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train {
            config,
            overrides,
            out,
        } => cmd_train(&config, &overrides, out),
        Command::Rollout {
            config,
            overrides,
            episodes,
            out,
        } => cmd_rollout(&config, &overrides, episodes, out),
        Command::Eval { run_dir, episodes } => cmd_eval(&run_dir, episodes),
        Command::Inspect {
            run_dir,
            iteration,
            agent,
        } => cmd_inspect(&run_dir, iteration, agent),
        Command::Plot { run_dirs, out } => cmd_plot(&run_dirs, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(2)
        }
    }
}

fn one_line(e: &anyhow::Error) -> String {
    format!("{e:#}").replace('\n', " ")
}

fn load_config(
    path: &Path,
    overrides: &[String],
    out: Option<PathBuf>,
) -> Result<RunConfig, Failure> {
    if !path.is_file() {
        return Err(usage(format!(
            "config file {} does not exist",
            path.display()
        )));
    }
    let mut config = RunConfig::load(path, overrides)?;
    if let Some(out) = out {
        config.run_dir = out;
    }
    Ok(config)
}

fn backend_for(config: &RunConfig) -> Result<std::sync::Arc<dyn ChatBackend>, Failure> {
    // Failing to construct a backend (unset key variable, unknown script) is a
    // configuration problem; failures while talking to it are runtime errors.
    build_backend(&config.backend).map_err(|e| Failure::Usage(Error::from(e).into()))
}

fn fmt_row(r: &MetricsRow) -> String {
    format!(
        "iteration {}: mean return {:.4} (std {:.4}) tokens {}",
        r.iteration, r.mean_return, r.std_return, r.tokens_by_tag
    )
}

fn cmd_train(path: &Path, overrides: &[String], out: Option<PathBuf>) -> CmdResult {
    let config = load_config(path, overrides, out)?;
    let backend = backend_for(&config)?;
    let summary = parley::train(&config, backend.as_ref(), &SystemClock, &mut |row| {
        println!("{}", fmt_row(row))
    })?;
    println!(
        "run complete: {} iterations in {}",
        summary.metrics.len(),
        config.run_dir.display()
    );
    Ok(())
}

fn cmd_rollout(
    path: &Path,
    overrides: &[String],
    episodes: Option<usize>,
    out: Option<PathBuf>,
) -> CmdResult {
    let config = load_config(path, overrides, out)?;
    let episodes = episodes.unwrap_or(config.rollouts_per_iteration);
    if episodes == 0 {
        return Err(usage("--episodes must be at least 1"));
    }
    let backend = backend_for(&config)?;
    let env = config.environment()?;
    let policies = config.initial_policies(&SystemClock)?;
    let options = parley::rollout::RolloutOptions {
        decoding: config
            .sampling
            .decoding(parley::backend::OperatorTag::Actor),
        concurrent: config.learning.concurrent,
    };
    let trajectories = parley::rollout::collect_trajectories(
        &env,
        &policies,
        backend.as_ref(),
        episodes,
        config.seed,
        options,
    )?;
    let dir = RunDir::new(&config.run_dir);
    std::fs::create_dir_all(dir.root()).map_err(|e| Failure::from(Error::io(dir.root(), e)))?;
    let file = dir.root().join("trajectories.jsonl");
    save_trajectories(&trajectories, &file)?;
    let returns: Vec<f64> = trajectories
        .iter()
        .map(|t| parley::metrics::episodic_return(t, config.discount))
        .collect();
    let (mean, std) = parley::metrics::return_stats(&trajectories, config.discount)?;
    println!(
        "{} episodes written to {}",
        trajectories.len(),
        file.display()
    );
    println!("returns: {returns:?}");
    println!("mean return {mean:.4} (std {std:.4})");
    Ok(())
}

fn open_run(run_dir: &Path) -> Result<(RunDir, RunConfig), Failure> {
    let dir = RunDir::new(run_dir);
    if !dir.exists() {
        return Err(usage(format!(
            "{} is not a run directory",
            run_dir.display()
        )));
    }
    let config = dir.load_config()?;
    Ok((dir, config))
}

fn cmd_eval(run_dir: &Path, episodes: Option<usize>) -> CmdResult {
    let (dir, config) = open_run(run_dir)?;
    let episodes = episodes.unwrap_or(config.eval_episodes);
    if episodes == 0 {
        return Err(usage("--episodes must be at least 1"));
    }
    let version = dir.load_progress()?.completed_iterations as u32;
    let policies = dir.load_policies(config.n_agents, version)?;
    let backend = backend_for(&config)?;
    let eval = evaluate_config(&config, &policies, backend.as_ref(), episodes)?;
    println!("policy version {version}, {episodes} episodes");
    println!("mean return {} (std {})", eval.mean_return, eval.std_return);
    Ok(())
}

fn cmd_inspect(run_dir: &Path, iteration: usize, agent: usize) -> CmdResult {
    let (dir, config) = open_run(run_dir)?;
    let completed = dir.load_progress()?.completed_iterations;
    if iteration == 0 || iteration > completed {
        return Err(usage(format!(
            "--iteration {iteration} is out of range (completed iterations: 1..={completed})"
        )));
    }
    if agent >= config.n_agents {
        return Err(usage(format!(
            "--agent {agent} is out of range (n_agents = {})",
            config.n_agents
        )));
    }
    let mut out = String::new();
    let _ = writeln!(out, "== iteration {iteration}, agent {agent} ==");

    let _ = writeln!(out, "\n-- credit --");
    for c in dir
        .load_credits(iteration)?
        .iter()
        .filter(|c| c.agent.0 == agent)
    {
        let _ = writeln!(out, "[{} | {:?}]\n{}", c.trajectory_id, c.polarity, c.text);
    }
    let _ = writeln!(out, "\n-- gradients --");
    for g in dir
        .load_gradients(iteration)?
        .iter()
        .filter(|g| g.agent.0 == agent)
    {
        let _ = writeln!(out, "[{}]\n{}", g.trajectory_id, g.text);
    }
    let _ = writeln!(out, "\n-- synthesis --");
    for s in dir
        .load_syntheses(iteration)?
        .iter()
        .filter(|s| s.agent.0 == agent)
    {
        let _ = writeln!(out, "{}", s.text);
    }

    let policy = dir
        .load_policies(config.n_agents, iteration as u32)?
        .swap_remove(agent);
    let history = policy.history();
    let old = &history[iteration - 1].text;
    let new = &history[iteration].text;
    let _ = writeln!(
        out,
        "\n-- policy diff (version {} -> {iteration}) --",
        iteration - 1
    );
    let diff = TextDiff::from_lines(&with_newline(old), &with_newline(new))
        .unified_diff()
        .header(
            &format!("policy v{}", iteration - 1),
            &format!("policy v{iteration}"),
        )
        .to_string();
    if diff.is_empty() {
        let _ = writeln!(out, "(unchanged)");
    } else {
        out.push_str(&diff);
    }
    print!("{out}");
    Ok(())
}

fn with_newline(s: &str) -> String {
    if s.ends_with('\n') {
        s.to_string()
    } else {
        format!("{s}\n")
    }
}

struct Curve {
    label: String,
    rows: Vec<MetricsRow>,
}

fn cmd_plot(run_dirs: &[PathBuf], out: Option<PathBuf>) -> CmdResult {
    let mut curves = Vec::new();
    for run in run_dirs {
        let path = RunDir::new(run).metrics();
        let rows = read_metrics(&path)
            .with_context(|| format!("cannot read metrics for {}", run.display()))
            .map_err(Failure::Usage)?;
        if rows.is_empty() {
            return Err(usage(format!("{} has no metrics rows", path.display())));
        }
        let label = run
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| run.display().to_string());
        curves.push(Curve { label, rows });
    }
    let svg_path = out.unwrap_or_else(|| run_dirs[0].join("learning_curve.svg"));
    let csv_path = svg_path.with_extension("csv");

    let mut csv = String::from("run,iteration,mean_return,std_return\n");
    for c in &curves {
        for r in &c.rows {
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                csv_field(&c.label),
                r.iteration,
                r.mean_return,
                r.std_return
            );
        }
    }
    write_atomic(&svg_path, &render_svg(&curves))?;
    write_atomic(&csv_path, &csv)?;
    let points: usize = curves.iter().map(|c| c.rows.len()).sum();
    println!(
        "{} curves, {points} points: {} and {}",
        curves.len(),
        svg_path.display(),
        csv_path.display()
    );
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn render_svg(curves: &[Curve]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let all = curves.iter().flat_map(|c| c.rows.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for r in all {
        x0 = x0.min(r.iteration as f64);
        x1 = x1.max(r.iteration as f64);
        y0 = y0.min(r.mean_return);
        y1 = y1.max(r.mean_return);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>"#,
        b = h - m,
        r = w - m
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">iteration</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">mean return</text>"#,
        h / 2.0,
        h / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y1:.2}</text><text x="{}" y="{}" font-size="10" text-anchor="end">{y0:.2}</text>"#,
        m - 4.0,
        m + 4.0,
        m - 4.0,
        h - m
    );
    for (k, c) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = c
            .rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", sx(r.iteration as f64), sy(r.mean_return)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for r in &c.rows {
            let _ = writeln!(
                s,
                r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(r.iteration as f64),
                sy(r.mean_return)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            w - m - 120.0,
            m + 14.0 * (k as f64 + 1.0),
            xml_escape(&c.label)
        );
    }
    s.push_str("</svg>\n");
    s
}
