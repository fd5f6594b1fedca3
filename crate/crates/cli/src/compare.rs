//! `cflsim compare`: the strategy x seed cross product under one config.

use std::path::{Path, PathBuf};

use cfl_core::orchestrator::{ExperimentConfig, RunSummary};
use cfl_core::scheduling::StrategyKind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::run;

pub const COMPARISON: &str = "comparison.csv";
pub const COMPARISON_SUMMARY: &str = "comparison_summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub strategy: String,
    pub seed: u64,
    pub first_split_round: Option<usize>,
    /// Max minus min of the per-client best-model accuracy.
    pub gap: f64,
    pub rounds_to_all_stopped: Option<usize>,
    pub total_time_s: f64,
}

impl CompareRow {
    fn new(summary: &RunSummary) -> Self {
        Self {
            strategy: summary.config.strategy.name().to_string(),
            seed: summary.config.seed,
            first_split_round: summary.first_split_round,
            gap: summary.accuracy.gap,
            rounds_to_all_stopped: summary.rounds_to_all_stopped,
            total_time_s: summary.total_time_s,
        }
    }
}

/// One line per (strategy, metric). `n` counts the runs where the metric is
/// defined; `std` is the sample standard deviation (0 when `n == 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub metric: String,
    pub runs: usize,
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (Some(mean), Some(var.sqrt()))
}

pub fn summarize_rows(rows: &[CompareRow]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.strategy.as_str()) {
            order.push(&r.strategy);
        }
    }
    type Metric = fn(&CompareRow) -> Option<f64>;
    let metrics: [(&str, Metric); 4] = [
        ("first_split_round", |r| r.first_split_round.map(|v| v as f64)),
        ("gap", |r| Some(r.gap)),
        ("rounds_to_all_stopped", |r| r.rounds_to_all_stopped.map(|v| v as f64)),
        ("total_time_s", |r| Some(r.total_time_s)),
    ];
    let mut out = Vec::new();
    for s in order {
        let group: Vec<&CompareRow> = rows.iter().filter(|r| r.strategy == s).collect();
        for (name, get) in metrics {
            let xs: Vec<f64> = group.iter().filter_map(|r| get(r)).collect();
            let (mean, std) = mean_std(&xs);
            out.push(SummaryRow {
                strategy: s.to_string(),
                metric: name.to_string(),
                runs: group.len(),
                n: xs.len(),
                mean,
                std,
            });
        }
    }
    out
}

fn cell_dir(out: &Path, index: usize, strategy: StrategyKind, seed: u64) -> PathBuf {
    out.join("cells").join(format!("{index:03}_{}_seed{seed}", strategy.name()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Runs every cell (strategies outer, seeds inner) into its own directory
/// under `out/cells`, then merges the summaries in listing order.
pub fn execute(
    base: &ExperimentConfig,
    overrides: &[String],
    strategies: &[StrategyKind],
    seeds: &[u64],
    jobs: Option<usize>,
    out: &Path,
) -> Result<Vec<CompareRow>, CliError> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(CliError::Config("need at least one strategy and one seed".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let cells: Vec<(usize, StrategyKind, u64)> = strategies
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .enumerate()
        .map(|(i, (s, seed))| (i, s, seed))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.unwrap_or(0)).build()?;
    let results: Vec<Result<CompareRow, CliError>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(i, strategy, seed)| {
                let cfg = ExperimentConfig { strategy, seed, ..base.clone() };
                let mut ov = overrides.to_vec();
                ov.push(format!("strategy=\"{}\"", strategy.name()));
                ov.push(format!("seed={seed}"));
                log::info!("cell {i}: {} seed {seed}", strategy.name());
                let summary = run::execute(&cfg, &ov, &cell_dir(out, i, strategy, seed))
                    .map_err(|e| CliError::Cell { cell: format!("{} seed {seed}", strategy.name()), source: Box::new(e) })?;
                Ok(CompareRow::new(&summary))
            })
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    write_csv(&out.join(COMPARISON), &rows)?;
    write_csv(&out.join(COMPARISON_SUMMARY), &summarize_rows(&rows))?;
    Ok(rows)
}
