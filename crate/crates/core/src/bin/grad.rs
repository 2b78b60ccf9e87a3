use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use grad_core::env::{read_trajectories, write_trajectories, EpisodeSummary};
use grad_core::eval::{
    budget_sweep, run_ablation, run_expert_sweep, score, write_report, ActionMode, ConstraintSpec,
    EvalSettings, Variant, ABLATION_LEVELS, BUDGET_LEVELS, EXPERT_COUNTS,
};
use grad_core::oracle::{
    certify_closed_form, fractional_upper_bound, solve_bruteforce, solve_threshold,
    BiddingInstance, OracleSolution, MAX_BRUTEFORCE,
};
use grad_core::train::{generate_behavior_data, train_run, Checkpoint, RunConfig};

#[derive(Parser)]
#[command(name = "grad", version, about = "Offline auto-bidding: train, evaluate, score")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Log behavior data and train a model.
    Train {
        /// Flat key-value TOML config; defaults to the desk profile.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write behavior-policy trajectories as JSON lines.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an evaluation sweep from a trained checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        sweep: Sweep,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Evaluation episodes per seed and budget level.
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, value_enum, default_value_t = Mode::Exploit)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trajectory logs that carry episode summaries.
    Score {
        #[arg(long)]
        trajectories: PathBuf,
        /// `cpc:<limit>` or `cpa:<limit>`, optionally `:<beta>`; repeatable.
        #[arg(long = "constraint", required = true)]
        constraints: Vec<ConstraintSpec>,
    },
    /// Exact and greedy solvers for small instances.
    Oracle {
        #[command(subcommand)]
        command: OracleCommand,
    },
}

#[derive(Subcommand)]
enum OracleCommand {
    Solve {
        /// JSON instance: `{"impressions": [{"value", "cost", "pctr"?}], "budget", "cpc_limit"?}`.
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Auto)]
        method: Method,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Budgets,
    Experts,
    Ablation,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exploit,
    Explore,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    /// Brute force when the instance is small enough, greedy otherwise.
    Auto,
    Bruteforce,
    Threshold,
}

#[derive(Serialize)]
struct OracleReport {
    method: &'static str,
    solution: OracleSolution,
    /// Whether a single threshold reproduces the selection up to one item.
    #[serde(skip_serializing_if = "Option::is_none")]
    closed_form_certified: Option<bool>,
    fractional_upper_bound: f64,
}

fn load_run(config: Option<&PathBuf>) -> Result<RunConfig> {
    Ok(match config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    })
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, out } => {
            let run = load_run(config.as_ref())?;
            let trained = train_run(&run, Some(&out))?;
            let last = trained.losses.last().copied().unwrap_or_default();
            eprintln!(
                "trained {} steps, final loss {:.6}, checkpoint in {}",
                trained.checkpoint.manifest.step,
                last.total,
                out.join("checkpoint").display()
            );
        }
        Command::Generate { config, out } => {
            let run = load_run(config.as_ref())?;
            let data = generate_behavior_data(&run.env, &run.behavior, run.train.seed)?;
            write_trajectories(BufWriter::new(File::create(&out)?), &data)?;
            eprintln!("wrote {} episodes to {}", data.len(), out.display());
        }
        Command::Eval {
            checkpoint,
            sweep,
            seeds,
            episodes,
            mode,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let run = ckpt.run_config();
            let seeds: Vec<u64> = (0..seeds).collect();
            let settings = EvalSettings {
                episodes,
                mode: match mode {
                    Mode::Exploit => ActionMode::Exploit,
                    Mode::Explore => ActionMode::Explore,
                },
                ..EvalSettings::default()
            };
            let progress = |s: &str| eprintln!("{s}");
            match sweep {
                Sweep::Budgets => {
                    let units: Vec<_> = seeds.iter().map(|&s| (&ckpt, s)).collect();
                    let r = budget_sweep(&units, &run.env, &BUDGET_LEVELS, &settings)?;
                    write_report(&out, "budgets", &r, &r.csv_rows())?;
                    print_json(&r)?;
                }
                Sweep::Ablation => {
                    let r = run_ablation(&run, &Variant::ALL, &seeds, &ABLATION_LEVELS, &settings, progress)?;
                    write_report(&out, "ablation", &r, &r.csv_rows())?;
                    print_json(&r)?;
                }
                Sweep::Experts => {
                    let r = run_expert_sweep(&run, &EXPERT_COUNTS, &seeds, &settings, progress)?;
                    write_report(&out, "experts", &r, &r)?;
                    print_json(&r)?;
                }
            }
        }
        Command::Score {
            trajectories,
            constraints,
        } => {
            let file = File::open(&trajectories)
                .with_context(|| format!("opening {}", trajectories.display()))?;
            let trajs = read_trajectories(BufReader::new(file))?;
            let summaries = trajs
                .iter()
                .map(|t| {
                    t.summary.with_context(|| {
                        format!("episode {} has no summary to score", t.episode_id)
                    })
                })
                .collect::<Result<Vec<EpisodeSummary>>>()?;
            print_json(&score(&summaries, &constraints)?)?;
        }
        Command::Oracle {
            command: OracleCommand::Solve { instance, method },
        } => {
            let text = std::fs::read_to_string(&instance)
                .with_context(|| format!("reading {}", instance.display()))?;
            let inst: BiddingInstance = serde_json::from_str(&text)?;
            let brute = match method {
                Method::Auto => inst.len() <= MAX_BRUTEFORCE,
                Method::Bruteforce => true,
                Method::Threshold => false,
            };
            if !brute && inst.cpc_limit.is_some() {
                bail!("the threshold solver handles budget-only instances");
            }
            let (name, solution) = if brute {
                ("bruteforce", solve_bruteforce(&inst)?)
            } else {
                ("threshold", solve_threshold(&inst)?)
            };
            let certified = (brute && inst.cpc_limit.is_none())
                .then(|| certify_closed_form(&inst, &solution));
            print_json(&OracleReport {
                method: name,
                closed_form_certified: certified,
                fractional_upper_bound: fractional_upper_bound(&inst)?,
                solution,
            })?;
        }
    }
    Ok(())
}
