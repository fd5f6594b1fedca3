//! `cflsim`: run, compare and bound-check clustered federated learning
//! simulations from a JSON config.

mod bound;
mod compare;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use cfl_core::scheduling::StrategyKind;
use clap::{Args, Parser, Subcommand};

use crate::config::Override;
use crate::error::CliError;

const LOG_ENV: &str = "CFLSIM_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "cflsim",
    version,
    about = "Clustered federated learning over a simulated wireless edge",
    after_help = "Log verbosity is read from CFLSIM_LOG (error, warn, info, debug, trace; default warn).\n\
                  Exit codes: 0 success, 1 runtime failure, 2 invalid config or arguments."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulation and write manifest.json, events.jsonl, summary.json and metrics.csv.
    Run(RunArgs),
    /// Run every strategy x seed pair and write comparison.csv and comparison_summary.csv.
    Compare(CompareArgs),
    /// Check the convergence bound on quadratics and write bound.csv and bound_report.json.
    Bound(BoundArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment config (JSON). A run manifest is also accepted and reruns its config snapshot.
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, short)]
    out: PathBuf,
    /// Override a config value, e.g. `--set wireless.subchannels=4`. Values parse as JSON, else as
    /// strings. Repeatable; later settings win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<Override>,
    /// Evaluate test accuracy every N rounds.
    #[arg(long, value_name = "N")]
    eval_every: Option<usize>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Master seed (u64).
    #[arg(long)]
    seed: Option<u64>,
    /// Scheduling strategy: proposed_two_phase, random, best_channel, best_l2norm or max_samples.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<StrategyKind>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Strategies, comma separated (names as for `run --strategy`). Defaults to all five.
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    strategies: Vec<StrategyKind>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// Worker threads for the campaign (default: one per core).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct BoundArgs {
    /// Harness config (JSON). Missing keys take their defaults.
    #[arg(long, short, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Start from a named case instead of a file.
    #[arg(long, value_enum)]
    preset: Option<bound::Preset>,
    /// Output directory, created if missing.
    #[arg(long, short)]
    out: PathBuf,
    /// Override a harness value, e.g. `--set local_steps=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<Override>,
    /// Seed of the problem instance.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    s.parse().map_err(|e: cfl_core::Error| e.to_string())
}

/// `--set` values first, then the dedicated flags.
fn overrides(common: &ConfigArgs, extra: Vec<Override>) -> Vec<Override> {
    let mut all = common.set.clone();
    if let Some(n) = common.eval_every {
        all.push(Override::new("eval_every", n));
    }
    all.extend(extra);
    all
}

fn describe(overrides: &[Override]) -> Vec<String> {
    overrides.iter().map(ToString::to_string).collect()
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let mut extra = Vec::new();
    if let Some(seed) = args.seed {
        extra.push(Override::new("seed", seed));
    }
    if let Some(s) = args.strategy {
        extra.push(Override::new("strategy", s.name()));
    }
    let ov = overrides(&args.common, extra);
    let cfg = config::load_experiment(&args.common.config, &ov)?;
    log::info!("running {} clients, strategy {}, seed {}", cfg.num_clients, cfg.strategy.name(), cfg.seed);
    let s = run::execute(&cfg, &describe(&ov), &args.common.out)?;
    println!(
        "{}: {} rounds ({:?}), first split {}, ARI {:.3}, gap {:.3}, simulated {:.3} s -> {}",
        cfg.strategy.name(),
        s.rounds_run,
        s.stop_reason,
        opt(s.first_split_round),
        s.adjusted_rand_index,
        s.accuracy.gap,
        s.total_time_s,
        args.common.out.display()
    );
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let ov = overrides(&args.common, Vec::new());
    let base = config::load_experiment(&args.common.config, &ov)?;
    let strategies = if args.strategies.is_empty() { StrategyKind::ALL.to_vec() } else { args.strategies };
    let rows = compare::execute(&base, &describe(&ov), &strategies, &args.seeds, args.jobs, &args.common.out)?;
    for r in compare::summarize_rows(&rows) {
        println!("{:<16} {:<22} n={:<3} mean={} std={}", r.strategy, r.metric, r.n, opt(r.mean), opt(r.std));
    }
    Ok(())
}

fn cmd_bound(args: BoundArgs) -> Result<(), CliError> {
    let mut ov = args.set;
    if let Some(seed) = args.seed {
        ov.push(Override::new("base_seed", seed));
    }
    let base = args.preset.unwrap_or(bound::Preset::Heterogeneous).config();
    let cfg = config::load_or(args.config.as_deref(), base, &ov)?;
    let r = bound::execute(&cfg, &args.out)?;
    println!(
        "bound: {} violations over {} rounds x {} seeds, max ratio {:.4}, zeta1 {:.6}, {} zeta1 findings -> {}",
        r.violation_count,
        cfg.rounds,
        cfg.seeds,
        r.report.max_ratio,
        r.report.zeta1,
        r.zeta1_findings.len(),
        args.out.display()
    );
    Ok(())
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Bound(a) => cmd_bound(a),
    }
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

