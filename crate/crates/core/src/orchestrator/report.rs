use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::clustering::{adjusted_rand_index, ClusterTree, NodeSnapshot};
use crate::data::FederatedDataset;
use crate::error::{Error, Result};
use crate::model::accuracy;
use crate::params::ParamVector;
use crate::scheduling::max_concurrent_uploads;

use super::config::ExperimentConfig;
use super::engine::RunOutcome;
use super::record::{RoundRecord, StopReason};

/// Smallest round whose record contains a split.
pub fn first_split_round(records: &[RoundRecord]) -> Option<usize> {
    records.iter().find(|r| r.has_split()).map(|r| r.round)
}

/// The conventional model (root) followed by the specialized leaf models.
pub fn final_models(tree: &ClusterTree) -> Vec<(usize, &ParamVector)> {
    let mut out = vec![(0, &tree.root().model)];
    out.extend(tree.leaves().into_iter().filter(|&id| id != 0).map(|id| (id, &tree.node(id).model)));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    /// Node id of each evaluated model; row order of `matrix`.
    pub models: Vec<usize>,
    /// `matrix[m][k]`: accuracy of model `m` on client `k`'s test shard.
    pub matrix: Vec<Vec<f64>>,
    pub best: Vec<f64>,
    /// Row index of the best model per client; ties to the first row.
    pub best_model: Vec<usize>,
    /// `max_k best_k - min_k best_k`.
    pub gap: f64,
    pub mean_best: f64,
}

pub fn accuracy_report(models: &[(usize, &ParamVector)], dataset: &FederatedDataset) -> Result<AccuracyReport> {
    if models.is_empty() || dataset.num_clients() == 0 {
        return Err(Error::invalid("accuracy report needs at least one model and one client"));
    }
    let mut matrix = Vec::with_capacity(models.len());
    for (_, m) in models {
        let row = dataset
            .shards
            .values()
            .map(|c| accuracy(m, &c.test, &dataset.spec))
            .collect::<Result<Vec<f64>>>()?;
        matrix.push(row);
    }
    let k = dataset.num_clients();
    let mut best = vec![f64::NEG_INFINITY; k];
    let mut best_model = vec![0; k];
    for (m, row) in matrix.iter().enumerate() {
        for (c, &a) in row.iter().enumerate() {
            if a > best[c] {
                best[c] = a;
                best_model[c] = m;
            }
        }
    }
    let max = best.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = best.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(AccuracyReport {
        models: models.iter().map(|m| m.0).collect(),
        mean_best: best.iter().sum::<f64>() / k as f64,
        matrix,
        best,
        best_model,
        gap: max - min,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub stop_reason: StopReason,
    pub rounds_run: usize,
    pub total_time_s: f64,
    pub first_split_round: Option<usize>,
    /// Last round when the run ended because every cluster stopped.
    pub rounds_to_all_stopped: Option<usize>,
    pub split_count: usize,
    pub leaf_partition: Vec<Vec<usize>>,
    pub ground_truth: Vec<Vec<usize>>,
    pub adjusted_rand_index: f64,
    pub tree: Vec<NodeSnapshot>,
    pub accuracy: AccuracyReport,
}

pub fn summarize(cfg: &ExperimentConfig, outcome: &RunOutcome) -> Result<RunSummary> {
    let tree = &outcome.tree;
    let leaf_partition: Vec<Vec<usize>> = tree.leaves().into_iter().map(|id| tree.node(id).members.clone()).collect();
    let ari = adjusted_rand_index(&tree.assignment(cfg.num_clients), &outcome.dataset.ground_truth_labels())?;
    Ok(RunSummary {
        config: cfg.clone(),
        stop_reason: outcome.stop_reason,
        rounds_run: outcome.records.len(),
        total_time_s: outcome.total_time_s(),
        first_split_round: first_split_round(&outcome.records),
        rounds_to_all_stopped: (outcome.stop_reason == StopReason::AllStopped)
            .then(|| outcome.records.last().map_or(0, |r| r.round)),
        split_count: tree.split_count(),
        leaf_partition,
        ground_truth: outcome.dataset.ground_truth_groups.clone(),
        adjusted_rand_index: ari,
        tree: tree.snapshot(),
        accuracy: accuracy_report(&final_models(tree), &outcome.dataset)?,
    })
}

/// Writes one JSON object per line.
pub fn write_event(out: &mut impl Write, record: &RoundRecord) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_events(input: impl BufRead) -> Result<Vec<RoundRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// `(round, metric, value)` rows.
pub fn metric_rows(records: &[RoundRecord]) -> Vec<(usize, String, f64)> {
    let mut rows = Vec::new();
    for r in records {
        let mut push = |name: String, v: f64| rows.push((r.round, name, v));
        push("deadline_s".into(), r.deadline_s);
        push("cumulative_time_s".into(), r.cumulative_time_s);
        push("participants".into(), r.schedule.selected.len() as f64);
        push("aggregation_sets".into(), r.aggregation_set_count as f64);
        push("mean_update_norm".into(), r.mean_update_norm);
        push("max_update_norm".into(), r.max_update_norm);
        push("leaves".into(), r.tree.iter().filter(|n| n.children.is_empty()).count() as f64);
        for c in &r.clusters {
            push(format!("cluster{}_mean_update_norm", c.node), c.mean_update_norm);
            push(format!("cluster{}_max_update_norm", c.node), c.max_update_norm);
            if let Some(l) = c.train_loss {
                push(format!("cluster{}_train_loss", c.node), l);
            }
            if let Some(a) = c.test_accuracy {
                push(format!("cluster{}_test_accuracy", c.node), a);
            }
        }
        if let Some(acc) = &r.client_accuracy {
            let vals: Vec<f64> = acc.values().copied().collect();
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            push("client_accuracy_min".into(), min);
            push("client_accuracy_mean".into(), vals.iter().sum::<f64>() / vals.len() as f64);
            push("client_accuracy_max".into(), max);
        }
    }
    rows
}

pub fn write_metrics_csv(out: &mut impl Write, records: &[RoundRecord]) -> Result<()> {
    writeln!(out, "round,metric,value")?;
    for (round, name, value) in metric_rows(records) {
        writeln!(out, "{round},{name},{value}")?;
    }
    Ok(())
}

/// A resource constraint broken in a logged round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    ConcurrentUploads { round: usize, peak: usize, limit: usize },
    LateClient { round: usize, client: usize, finish_s: f64, deadline_s: f64 },
    CumulativeTime { round: usize, expected_s: f64, logged_s: f64 },
    Budget { round: usize, cumulative_s: f64, budget_s: f64 },
}

/// Re-checks the scheduling constraints from logged records alone.
pub fn audit(records: &[RoundRecord], subchannels: usize, budget_s: Option<f64>) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut cumulative = 0.0;
    for r in records {
        let peak = max_concurrent_uploads(&r.schedule.slots);
        if peak > subchannels {
            out.push(Violation::ConcurrentUploads { round: r.round, peak, limit: subchannels });
        }
        for s in &r.schedule.slots {
            // Own latency `T_k^tot` as compute plus upload, and the actual
            // finish time including any wait for a free sub-channel.
            let own = s.compute_end + (s.upload_end - s.upload_start);
            let finish = own.max(s.upload_end);
            if finish > r.deadline_s {
                out.push(Violation::LateClient {
                    round: r.round,
                    client: s.client,
                    finish_s: finish,
                    deadline_s: r.deadline_s,
                });
            }
        }
        cumulative += r.deadline_s;
        if (cumulative - r.cumulative_time_s).abs() > 1e-9 * cumulative.max(1.0) {
            out.push(Violation::CumulativeTime { round: r.round, expected_s: cumulative, logged_s: r.cumulative_time_s });
        }
        if let Some(b) = budget_s {
            if r.cumulative_time_s > b {
                out.push(Violation::Budget { round: r.round, cumulative_s: r.cumulative_time_s, budget_s: b });
            }
        }
    }
    out
}
