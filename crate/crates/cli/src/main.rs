use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use espl::orchestrator::{build_reflector, replay_ratings, Checkpoint, EnvKind, Environment, EsplConfig, RunSummary, Trainer};
use espl::population::TreeFormat;

#[derive(Parser)]
#[command(name = "espl", version, about = "Evolve system prompts alongside policy weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a run from a config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        env: Option<EnvKind>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint_dir: PathBuf,
    },
    /// Continue a run from a checkpoint, appending to its metrics log.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Raise the iteration budget.
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Print the prompt lineage tree stored in a checkpoint.
    ExportTree {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dot")]
        format: TreeFormat,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Recompute all ratings from a metrics log.
    ReplayRatings {
        #[arg(long)]
        metrics: PathBuf,
        /// Also compare against the ratings stored in this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Relative paths in a config are taken relative to the config file.
fn anchor(path: &mut Option<PathBuf>, base: &Path) {
    if let Some(p) = path {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

fn report(trainer: &Trainer, summary: &RunSummary) {
    let top = trainer.top_prompt();
    println!(
        "iterations {}..{}{}; population {}; top prompt {} (mu {:.3}, sigma {:.3})",
        summary.start_iteration,
        summary.end_iteration,
        if summary.stopped_early { " (early stop)" } else { "" },
        trainer.population().len(),
        top.id,
        top.rating.mu(),
        top.rating.sigma()
    );
    if let Some(score) = trainer.evaluate_top() {
        println!("expected reward of top prompt: {score:.4}");
    }
    if let Some(path) = &summary.last_checkpoint {
        println!("checkpoint: {}", path.display());
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, env, iters, seed, checkpoint_dir } => {
            let mut cfg = match &config {
                Some(path) => {
                    let mut cfg = EsplConfig::load(path)?;
                    let base = path.parent().unwrap_or(Path::new("."));
                    anchor(&mut cfg.env.fixture, base);
                    anchor(&mut cfg.env.problems, base);
                    anchor(&mut cfg.reflector.template_dir, base);
                    cfg
                }
                None => EsplConfig::default(),
            };
            if let Some(kind) = env {
                cfg.env.kind = kind;
            }
            if let Some(n) = iters {
                cfg.iterations = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let mut trainer = Trainer::from_config(cfg)?;
            trainer.write_to(&checkpoint_dir)?;
            let summary = trainer.run()?;
            report(&trainer, &summary);
        }
        Command::Resume { checkpoint, iters } => {
            let mut ckpt = Checkpoint::load(&checkpoint)?;
            if let Some(n) = iters {
                ckpt.config.iterations = n;
            }
            let dir = checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf();
            let env = Environment::from_config(&ckpt.config)?;
            let reflector = build_reflector(&ckpt.config, &env)?;
            let mut trainer = Trainer::resume(ckpt, env, reflector, Some(&dir))?;
            let summary = trainer.run()?;
            report(&trainer, &summary);
        }
        Command::ExportTree { checkpoint, format, output } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let bytes = ckpt.state.population.export_tree(format)?;
            match output {
                Some(path) => std::fs::write(&path, bytes).with_context(|| path.display().to_string())?,
                None => std::io::stdout().write_all(&bytes)?,
            }
        }
        Command::ReplayRatings { metrics, checkpoint } => {
            let file = File::open(&metrics).with_context(|| metrics.display().to_string())?;
            let report = replay_ratings(BufReader::new(file))?;
            let mut mismatches = report.mismatches.clone();
            if let Some(path) = checkpoint {
                let ckpt = Checkpoint::load(&path)?;
                for node in ckpt.state.population.nodes() {
                    match report.ratings.get(&node.id) {
                        Some(r) if *r == node.rating => {}
                        Some(_) => mismatches.push(format!("final rating of {} differs from the checkpoint", node.id)),
                        None => mismatches.push(format!("{} is missing from the metrics log", node.id)),
                    }
                }
                if report.ratings.len() != ckpt.state.population.len() {
                    mismatches.push("metrics log and checkpoint hold different prompts".into());
                }
            }
            let ratings: Vec<_> = report
                .ratings
                .iter()
                .map(|(id, r)| serde_json::json!({ "id": id, "mu": r.mu(), "sigma": r.sigma() }))
                .collect();
            let out = serde_json::json!({
                "iterations": report.iterations,
                "ratings": ratings,
                "mismatches": mismatches,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
            if !mismatches.is_empty() {
                eprintln!("replay found {} mismatch(es)", mismatches.len());
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
