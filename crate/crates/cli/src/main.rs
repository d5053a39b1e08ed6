//! `efe-lab`: train agents, pre-train the VAE, and plot learning curves.
//!
//! Exit codes: 0 success, 1 invalid configuration, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use efe_lab::error::HarnessError;
use efe_lab::harness::{
    aggregate, final_mar_median, parse_config, pretrain_vae, read_episodes, render_curves, run_experiment, AgentKind, RunConfig, Scenario, EPISODE_HEADER,
};

#[derive(Parser)]
#[command(name = "efe-lab", version, about = "Deep active inference and DQN on pixel CartPole")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a seeded multi-run experiment and write its episode CSV.
    Train(TrainArgs),
    /// Plot mean MAR with ±1 std bands from one or more output directories.
    Plot {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect random-policy frames and pre-train the encoder/decoder.
    Pretrain {
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        epochs: usize,
        /// Dataset cache; the trained weights go to `<out>.vae`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    agent: Option<AgentKind>,
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    pretrain_cache: Option<PathBuf>,
    /// Extra `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn runtime_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) => Failure::Config(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(args) => train(args),
        Command::Plot { inputs, out } => plot(&inputs, &out),
        Command::Pretrain { episodes, epochs, out, seed } => pretrain(episodes, epochs, out, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn train_entries(args: &TrainArgs) -> Result<Vec<(String, String)>, Failure> {
    let mut entries = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(config_err)?;
            parse_config(&text).with_context(|| p.display().to_string()).map_err(config_err)?
        }
        None => Vec::new(),
    };
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            entries.push((k.to_string(), v));
        }
    };
    flag("agent", args.agent.map(|a| a.to_string()));
    flag("scenario", args.scenario.map(|s| s.to_string()));
    flag("runs", args.runs.map(|v| v.to_string()));
    flag("episodes", args.episodes.map(|v| v.to_string()));
    flag("seed", args.seed.map(|v| v.to_string()));
    flag("out", args.out.as_ref().map(|p| p.display().to_string()));
    flag("jobs", args.jobs.map(|v| v.to_string()));
    flag("pretrain_cache", args.pretrain_cache.as_ref().map(|p| p.display().to_string()));
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| config_err(anyhow!("`--set {kv}` is not KEY=VALUE")))?;
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(entries)
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let cfg = RunConfig::from_entries(&train_entries(&args)?).map_err(config_err)?;
    eprintln!("{}: {} runs x {} episodes, seed {}, jobs {} -> {}", cfg.stem(), cfg.runs, cfg.episodes, cfg.seed, cfg.jobs, cfg.out.display());
    let out = run_experiment(&cfg)?;
    let median = final_mar_median(&out.records).unwrap_or(0.0);
    println!("{}: median final MAR {median:.1} over {} runs", out.episodes_csv.display(), cfg.runs);
    Ok(())
}

/// Episode CSVs in `dir`, recognized by their header.
fn episode_csvs(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "csv") {
            let text = fs::read_to_string(&p)?;
            if text.lines().next().map(str::trim) == Some(EPISODE_HEADER) {
                found.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

fn plot(inputs: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let mut series = Vec::new();
    for dir in inputs {
        if dir.join(efe_lab::harness::INCOMPLETE_MARKER).exists() {
            eprintln!("warning: {} is marked incomplete", dir.display());
        }
        for csv in episode_csvs(dir).map_err(runtime_err)? {
            let label = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            series.push((label, aggregate(&read_episodes(&csv)?)?));
        }
    }
    if series.is_empty() {
        return Err(runtime_err(anyhow!("no episode CSVs found in the input directories")));
    }
    let svg = render_curves(&series)?;
    fs::write(out, svg).with_context(|| format!("writing {}", out.display())).map_err(runtime_err)?;
    println!("{}: {} curves", out.display(), series.len());
    Ok(())
}

fn pretrain(episodes: usize, epochs: usize, out: PathBuf, seed: u64) -> Result<(), Failure> {
    let mut cfg = RunConfig::new(AgentKind::Daif, Scenario::Pomdp);
    cfg.pretrain.episodes = episodes;
    cfg.pretrain.epochs = epochs;
    cfg.seed = seed;
    cfg.pretrain_cache = Some(out.clone());
    cfg.validate().map_err(config_err)?;
    if out.exists() {
        return Err(config_err(anyhow!("{} already exists", out.display())));
    }
    let p = pretrain_vae(&cfg)?;
    for (e, h) in p.history.iter().enumerate() {
        match h.validation {
            Some(v) => println!("epoch {}: train {:.2} validation {:.2}", e + 1, h.train, v),
            None => println!("epoch {}: train {:.2}", e + 1, h.train),
        }
    }
    if p.history.is_empty() {
        return Err(runtime_err(anyhow!("weights were loaded from an existing cache; nothing was trained")));
    }
    Ok(())
}
