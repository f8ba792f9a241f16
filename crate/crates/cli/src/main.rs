use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use nwm::planner::Constraint;
use nwm_cli::{commands, output_dir, PlanMode, RunConfig};

#[derive(Parser)]
#[command(name = "nwm", version, about = "Navigation world model toolkit")]
struct Cli {
    /// JSON run config; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every random stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (defaults to $NWM_OUTPUT_ROOT/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelInputs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate expert episodes and write a dataset.
    GenData {
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Roll a model out along one episode's actions.
    Rollout {
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
    /// Plan toward goal images with CEM.
    Plan {
        /// Use the ground-truth simulator on empty-room trials.
        #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
        oracle: bool,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long, required_unless_present = "oracle")]
        data: Option<PathBuf>,
        #[arg(long)]
        constraint: Option<Constraint>,
        #[arg(long)]
        population: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        evals_per_candidate: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Rank noisy expert proposals with the ground-truth simulator.
    Rank {
        #[arg(long)]
        pool: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Rollout metrics per horizon, one-step error and plan trajectory errors.
    Eval {
        #[command(flatten)]
        inputs: ModelInputs,
        /// Directory holding a `plan.json` to score.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Attention FLOPs and forward latency versus context length.
    Bench {
        #[arg(long, value_delimiter = ',')]
        contexts: Option<Vec<usize>>,
        #[arg(long)]
        tokens: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "data",
            Command::Train { .. } => "train",
            Command::Rollout { .. } => "rollout",
            Command::Plan { .. } => "plan",
            Command::Rank { .. } => "rank",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::GenData { episodes } => cfg.data.episodes = episodes.unwrap_or(cfg.data.episodes),
        Command::Train { steps, .. } => cfg.train.steps = steps.unwrap_or(cfg.train.steps),
        Command::Plan { constraint, population, iterations, evals_per_candidate, steps, dt, trials, .. } => {
            let p = &mut cfg.planner;
            p.cem.constraint = constraint.unwrap_or(p.cem.constraint);
            p.cem.population = population.unwrap_or(p.cem.population);
            p.cem.iterations = iterations.unwrap_or(p.cem.iterations);
            p.cem.steps = steps.unwrap_or(p.cem.steps);
            p.cem.dt = dt.unwrap_or(p.cem.dt);
            p.evals_per_candidate = evals_per_candidate.unwrap_or(p.evals_per_candidate);
            p.trials = trials.unwrap_or(p.trials);
        }
        Command::Rank { pool, trials } => {
            cfg.planner.pool = pool.unwrap_or(cfg.planner.pool);
            cfg.planner.trials = trials.unwrap_or(cfg.planner.trials);
        }
        Command::Eval { episodes, .. } => cfg.eval.episodes = episodes.unwrap_or(cfg.eval.episodes),
        Command::Bench { contexts, tokens, dim } => {
            let b = &mut cfg.bench;
            b.contexts = contexts.clone().unwrap_or(b.contexts.clone());
            b.tokens = tokens.unwrap_or(b.tokens);
            b.dim = dim.unwrap_or(b.dim);
        }
        Command::Rollout { .. } => {}
    }
    let cfg = cfg.resolve()?;
    let out = output_dir(cli.out.as_deref(), cli.command.name())?;
    match cli.command {
        Command::GenData { .. } => {
            let ds = commands::gen_data(&cfg, &out)?;
            eprintln!("wrote {} episodes to {}", ds.episodes.len(), out.display());
        }
        Command::Train { data, .. } => {
            let every = cfg.train.eval_every.max(1);
            let s = commands::train(&cfg, &data, &out, |r| {
                if let (Some(v), Some(b)) = (r.val_mse, r.baseline_mse) {
                    eprintln!("step {:>6}  loss {:.5}  val {:.5}  copy-last {:.5}", r.step + 1, r.loss, v, b);
                } else if (r.step + 1) % every == 0 {
                    eprintln!("step {:>6}  loss {:.5}", r.step + 1, r.loss);
                }
            })?;
            eprintln!("trained {} steps; checkpoint in {}", s.rows.len(), out.display());
        }
        Command::Rollout { inputs, episode } => {
            let s = commands::rollout_episode(&cfg, &inputs.checkpoint, &inputs.data, episode, &out)?;
            for r in &s.rows {
                println!("{:>5.2}s  psnr {:>7.3}  feature distance {:.4}", r.horizon, r.psnr, r.feature_distance);
            }
        }
        Command::Plan { oracle, checkpoint, data, .. } => {
            let mode = if oracle {
                PlanMode::Oracle
            } else {
                PlanMode::Model {
                    checkpoint: checkpoint.as_deref().context("--checkpoint is required without --oracle")?,
                    data: data.as_deref().context("--data is required without --oracle")?,
                }
            };
            print_json(&commands::plan(&cfg, mode, &out)?)?;
        }
        Command::Rank { .. } => print_json(&commands::rank(&cfg, cfg.planner.pool, &out)?)?,
        Command::Eval { inputs, plan, .. } => {
            let s = commands::eval(&cfg, &inputs.checkpoint, &inputs.data, plan.as_deref(), &out)?;
            write!(std::io::stdout().lock(), "{}", s.report.to_csv()?)?;
        }
        Command::Bench { .. } => {
            let s = commands::bench(&cfg, &out)?;
            println!(
                "cdit linear R2 {:.6}  dit quadratic R2 {:.6}  dit/cdit attention at m=4 {:.3}",
                s.cdit_linear_r2, s.dit_quadratic_r2, s.ratio_at_4
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
