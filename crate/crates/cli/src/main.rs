use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use greenpath::experiment::commands::{self, ScenarioRef, CHECKPOINT_FILE};
use greenpath::experiment::{self, ablation_options, COMBOS, WORKERS_ENV};
use greenpath::ma2c::checkpoint;
use greenpath::scenario::{load_scenario, Scenario};

#[derive(Parser)]
#[command(name = "greenpath", version, about = "Emergency-vehicle-aware signal control experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train signal agents and write a checkpoint plus learning curve.
    Train(TrainArgs),
    /// Evaluate a checkpoint greedily on several seeds.
    Eval(EvalArgs),
    /// Run baseline combos (and optionally a checkpoint) on several seeds.
    Benchmark(BenchArgs),
    /// Train and evaluate the full method next to its ablations.
    Ablate(AblateArgs),
    /// Collect runs under a directory into report.md and plotdata/.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Worker threads for independent runs.
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Training episodes; defaults to the scenario's `train.episodes`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Train one of the ablated variants instead of the full method.
    #[arg(long, default_value = "full")]
    variant: String,
}

#[derive(Args)]
struct SeedArgs {
    /// First evaluation seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 5)]
    runs: u64,
}

impl SeedArgs {
    fn seeds(&self) -> Vec<u64> {
        (self.seed..self.seed + self.runs).collect()
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    seeds: SeedArgs,
    /// Checkpoint file or a training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    seeds: SeedArgs,
    /// Combos to run, comma separated; defaults to every baseline, plus
    /// emvlight when a checkpoint is given.
    #[arg(long, value_delimiter = ',')]
    combo: Vec<String>,
    /// Checkpoint for the emvlight combo.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    seeds: SeedArgs,
    /// Ablations to compare against the full method, comma separated, or `all`.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    which: Vec<String>,
    /// Training seed shared by every variant.
    #[arg(long, default_value_t = 1)]
    train_seed: u64,
    /// Training episodes per variant; defaults to the scenario's `train.episodes`.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    out: PathBuf,
}

fn scenario(path: &Path) -> Result<Scenario> {
    load_scenario(path).with_context(|| format!("loading {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<greenpath::ma2c::Trainer> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    checkpoint::load(&file).with_context(|| format!("loading checkpoint {}", file.display()))
}

fn workers(c: &Common) -> usize {
    c.workers.filter(|&n| n > 0).unwrap_or_else(experiment::worker_count)
}

fn print_rows(rows: &[experiment::SummaryRow]) {
    use experiment::io::opt;
    for r in rows {
        println!(
            "{:<18} T_EMV {:>10} ± {:<10} T_avg {:>10} ± {:<10} lanes {:>6} censored {}{}",
            r.combo,
            opt(r.t_emv_mean),
            opt(r.t_emv_std),
            opt(r.t_avg_mean),
            opt(r.t_avg_std),
            opt(r.emergency_lanes_mean),
            r.censored,
            r.reward_variance.map(|v| format!(" reward-var {}", experiment::io::g6(v))).unwrap_or_default()
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(a) => {
            let s = scenario(&a.common.scenario)?;
            let opts = ablation_options(&a.variant, a.seed)?;
            let episodes = a.epochs.unwrap_or(s.train.episodes);
            let r = ScenarioRef {
                scenario: &s,
                path: Some(a.common.scenario.clone()),
            };
            let every = (episodes / 20).max(1);
            let (_, curve) = commands::run_train(&r, opts, episodes, &a.common.out, a.common.force, |rec| {
                if (rec.episode + 1) % every == 0 {
                    eprintln!(
                        "episode {:>5}  T_EMV {:>8}  T_avg {:>8}  reward {}",
                        rec.episode + 1,
                        experiment::io::opt(rec.t_emv),
                        experiment::io::opt(rec.t_avg),
                        experiment::io::g6(rec.mean_reward)
                    );
                }
            })?;
            println!("trained {} episodes into {}", curve.len(), a.common.out.display());
        }
        Cmd::Eval(a) => {
            let s = scenario(&a.common.scenario)?;
            let t = load_checkpoint(&a.checkpoint)?;
            let r = ScenarioRef {
                scenario: &s,
                path: Some(a.common.scenario.clone()),
            };
            let rows = commands::run_benchmark(
                &r,
                &["emvlight".to_string()],
                &a.seeds.seeds(),
                Some(&t),
                &a.common.out,
                a.common.force,
                workers(&a.common),
            )?;
            print_rows(&rows);
        }
        Cmd::Benchmark(a) => {
            let s = scenario(&a.common.scenario)?;
            let t = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let combos: Vec<String> = if a.combo.is_empty() {
                COMBOS
                    .iter()
                    .filter(|c| **c != "emvlight" || t.is_some())
                    .map(|c| c.to_string())
                    .collect()
            } else {
                a.combo.clone()
            };
            if combos.iter().any(|c| c == "emvlight") && t.is_none() {
                bail!("combo `emvlight` needs --checkpoint");
            }
            let r = ScenarioRef {
                scenario: &s,
                path: Some(a.common.scenario.clone()),
            };
            let rows = commands::run_benchmark(&r, &combos, &a.seeds.seeds(), t.as_ref(), &a.common.out, a.common.force, workers(&a.common))?;
            print_rows(&rows);
        }
        Cmd::Ablate(a) => {
            let s = scenario(&a.common.scenario)?;
            let episodes = a.epochs.unwrap_or(s.train.episodes);
            let r = ScenarioRef {
                scenario: &s,
                path: Some(a.common.scenario.clone()),
            };
            let rows = commands::run_ablation(
                &r,
                &a.which,
                a.train_seed,
                episodes,
                &a.seeds.seeds(),
                &a.common.out,
                a.common.force,
                workers(&a.common),
            )?;
            print_rows(&rows);
        }
        Cmd::Report(a) => {
            let path = commands::emit_report(&a.out)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
