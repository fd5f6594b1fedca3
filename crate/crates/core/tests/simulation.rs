use std::collections::{BTreeMap, BTreeSet};
use std::io::BufReader;

use cfl_core::clustering::NodeStatus;
use cfl_core::data::{generate, DataConfig};
use cfl_core::orchestrator::{
    audit, metric_rows, read_events, run, run_with_observer, summarize, write_event, write_metrics_csv,
    ExperimentConfig, RoundRecord, StopReason,
};
use cfl_core::scheduling::StrategyKind;
use cfl_core::Error;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SCENARIO: &str = include_str!("../../../configs/acceptance.json");

fn scenario(strategy: StrategyKind, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json_str(SCENARIO).unwrap();
    cfg.strategy = strategy;
    cfg.seed = seed;
    cfg
}

fn leaves_partition(r: &RoundRecord, k: usize) -> bool {
    let mut seen: Vec<usize> =
        r.tree.iter().filter(|n| n.children.is_empty()).flat_map(|n| n.members.iter().copied()).collect();
    seen.sort_unstable();
    seen == (0..k).collect::<Vec<_>>()
}

#[test]
fn dataset_regeneration_is_bit_identical() {
    let cfg = DataConfig::default();
    let a = serde_json::to_string(&generate(12, &cfg, 99).unwrap()).unwrap();
    let b = serde_json::to_string(&generate(12, &cfg, 99).unwrap()).unwrap();
    assert_eq!(a, b);
    let c = serde_json::to_string(&generate(12, &cfg, 100).unwrap()).unwrap();
    assert_ne!(a, c);
}

/// Chi-square test of independence between group and label.
fn group_label_p_value(data: &cfl_core::data::FederatedDataset, classes: usize) -> f64 {
    let groups = &data.ground_truth_groups;
    let mut table = vec![vec![0.0f64; classes]; groups.len()];
    for (g, members) in groups.iter().enumerate() {
        for &k in members {
            for &y in &data.client(k).unwrap().train.labels {
                table[g][y] += 1.0;
            }
        }
    }
    let cols: Vec<usize> = (0..classes).filter(|&c| table.iter().any(|row| row[c] > 0.0)).collect();
    let total: f64 = table.iter().flatten().sum();
    let row_sums: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let mut stat = 0.0;
    for (g, row) in table.iter().enumerate() {
        for &c in &cols {
            let col_sum: f64 = table.iter().map(|r| r[c]).sum();
            let expected = row_sums[g] * col_sum / total;
            stat += (row[c] - expected).powi(2) / expected;
        }
    }
    let dof = ((groups.len() - 1) * (cols.len() - 1)) as f64;
    1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
}

#[test]
fn groups_have_distinguishable_label_histograms() {
    let acceptance = scenario(StrategyKind::ProposedTwoPhase, 1).data;
    for (cfg, k) in [(DataConfig::default(), 15), (acceptance, 15)] {
        for seed in 1..=5 {
            let data = generate(k, &cfg, seed).unwrap();
            let p = group_label_p_value(&data, cfg.num_classes);
            assert!(p < 0.01, "seed {seed}: p = {p}");
        }
    }
}

#[test]
fn clients_of_one_group_share_label_support() {
    let cfg = scenario(StrategyKind::ProposedTwoPhase, 1).data;
    let data = generate(15, &cfg, 3).unwrap();
    for members in &data.ground_truth_groups {
        let support = |k: usize| -> BTreeSet<usize> {
            let c = data.client(k).unwrap();
            c.train.labels.iter().chain(&c.test.labels).copied().collect()
        };
        let union: BTreeSet<usize> = members.iter().flat_map(|&k| support(k)).collect();
        // Two components may carry the same label within a group.
        assert!(union.len() <= cfg.classes_per_client);
        // Every shard holds at least 64 samples, so each client sees every
        // component of its group.
        for &k in members {
            assert_eq!(support(k), union);
        }
    }
}

#[test]
fn every_round_leaves_partition_clients_and_constraints_hold() {
    for strategy in StrategyKind::ALL {
        let cfg = scenario(strategy, 21);
        let out = run(&cfg).unwrap();
        assert!(!out.records.is_empty());
        for r in &out.records {
            assert!(leaves_partition(r, cfg.num_clients), "{strategy:?} round {}", r.round);
            assert!(r.schedule.aggregation_sets.iter().all(|s| s.len() <= cfg.wireless.subchannels));
            for s in &r.schedule.slots {
                assert!(s.compute_end + (s.upload_end - s.upload_start) <= r.deadline_s + 1e-12);
            }
        }
        assert_eq!(audit(&out.records, cfg.wireless.subchannels, None), vec![]);
    }
}

#[test]
fn stopped_clusters_contribute_exactly_one_participant() {
    let mut checked = 0;
    for seed in 1..=5 {
        let cfg = scenario(StrategyKind::ProposedTwoPhase, seed);
        let out = run(&cfg).unwrap();
        for pair in out.records.windows(2) {
            let (before, r) = (&pair[0], &pair[1]);
            let selected: BTreeSet<usize> = r.schedule.selected.iter().copied().collect();
            for leaf in before.tree.iter().filter(|n| n.children.is_empty()) {
                let chosen = leaf.members.iter().filter(|k| selected.contains(k)).count();
                if leaf.status == NodeStatus::Stopped {
                    assert_eq!(chosen, 1, "seed {seed} round {} node {}", r.round, leaf.id);
                    checked += 1;
                } else {
                    assert_eq!(chosen, leaf.members.len());
                }
            }
        }
    }
    assert!(checked > 0, "no stopped cluster was ever scheduled");
}

#[test]
fn phase_one_selects_every_client_equally_often() {
    let cfg = scenario(StrategyKind::ProposedTwoPhase, 2);
    let out = run(&cfg).unwrap();
    let mut counts = vec![0usize; cfg.num_clients];
    for r in &out.records {
        if r.tree.iter().any(|n| n.status == NodeStatus::Stopped) {
            break;
        }
        for &k in &r.schedule.selected {
            counts[k] += 1;
        }
    }
    assert!(counts[0] > 0);
    assert!(counts.iter().all(|&c| c == counts[0]), "{counts:?}");
}

#[test]
fn active_cluster_loss_trends_down() {
    for seed in 1..=3 {
        let mut cfg = scenario(StrategyKind::ProposedTwoPhase, seed);
        cfg.data.num_groups = 1;
        cfg.data.hidden_dim = 0;
        cfg.eval_every = 1;
        let out = run(&cfg).unwrap();
        let mut series: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in &out.records {
            for c in &r.clusters {
                let active = r.tree.iter().any(|n| n.id == c.node && n.status == NodeStatus::Active);
                if let (true, Some(l)) = (active, c.train_loss) {
                    series.entry(c.node).or_default().push(l);
                }
            }
        }
        for losses in series.values() {
            for i in 10..losses.len() {
                assert!(losses[i] <= losses[i - 10] + 1e-3, "seed {seed}: {losses:?}");
            }
        }
    }
}

#[test]
fn event_log_round_trips_and_matches_records() {
    let cfg = scenario(StrategyKind::Random, 5);
    let mut buf = Vec::new();
    let out = run_with_observer(&cfg, |r| write_event(&mut buf, r)).unwrap();
    assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), out.records.len());
    let back = read_events(BufReader::new(&buf[..])).unwrap();
    assert_eq!(back, out.records);
    assert_eq!(audit(&back, cfg.wireless.subchannels, None), vec![]);
}

#[test]
fn metrics_csv_has_three_columns() {
    let cfg = scenario(StrategyKind::ProposedTwoPhase, 4);
    let out = run(&cfg).unwrap();
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &out.records).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("round,metric,value"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), metric_rows(&out.records).len());
    for line in rows {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 3, "{line}");
        cols[0].parse::<usize>().unwrap();
        assert!(cols[2].parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn budget_discards_the_overrunning_round() {
    let cfg = scenario(StrategyKind::ProposedTwoPhase, 6);
    let free = run(&cfg).unwrap();
    let budget = 0.4 * free.total_time_s();
    let limited = run(&ExperimentConfig { time_budget_s: Some(budget), ..cfg.clone() }).unwrap();
    assert_eq!(limited.stop_reason, StopReason::TimeBudget);
    assert!(limited.total_time_s() <= budget);
    let next = free.records[limited.records.len()].cumulative_time_s;
    assert!(next > budget, "the first discarded round would have fit");
    assert_eq!(limited.records, free.records[..limited.records.len()]);
}

#[test]
fn summary_is_consistent_with_records() {
    let cfg = scenario(StrategyKind::ProposedTwoPhase, 2);
    let out = run(&cfg).unwrap();
    let s = summarize(&cfg, &out).unwrap();
    assert_eq!(s.rounds_run, out.records.len());
    assert_eq!(s.first_split_round, out.records.iter().find(|r| r.has_split()).map(|r| r.round));
    let split_events = out
        .records
        .iter()
        .flat_map(|r| &r.events)
        .filter(|e| matches!(e, cfl_core::orchestrator::ClusterEvent::Split { .. }))
        .count();
    assert_eq!(s.split_count, split_events);
    assert_eq!(s.leaf_partition.iter().map(Vec::len).sum::<usize>(), cfg.num_clients);
    assert_eq!(s.stop_reason, StopReason::AllStopped);
    assert_eq!(s.rounds_to_all_stopped, out.records.last().map(|r| r.round));
    let text = serde_json::to_string(&s).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["config"]["seed"], 2);
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let mut cfg = scenario(StrategyKind::ProposedTwoPhase, 1);
    cfg.data.num_groups = 20;
    assert!(matches!(run(&cfg), Err(Error::Config(_))));
    let err = ExperimentConfig::from_json_str("{\"num_clients\": 4, \"epochs\": 0}").unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn observer_error_aborts_after_logged_rounds() {
    let cfg = scenario(StrategyKind::ProposedTwoPhase, 1);
    let mut seen = 0;
    let res = run_with_observer(&cfg, |r| {
        seen += 1;
        if r.round == 3 {
            Err(Error::InvalidArgument("stop here".into()))
        } else {
            Ok(())
        }
    });
    assert!(res.is_err());
    assert_eq!(seen, 3);
}

#[test]
fn audit_flags_tampered_logs() {
    use cfl_core::orchestrator::Violation;
    let cfg = scenario(StrategyKind::ProposedTwoPhase, 3);
    let out = run(&cfg).unwrap();
    let mut records = out.records.clone();
    // Squeeze every upload of round 1 into the same instant.
    for s in &mut records[0].schedule.slots {
        s.upload_start = 0.0;
        s.upload_end = 1.0;
    }
    records[1].deadline_s *= 0.5;
    let v = audit(&records, cfg.wireless.subchannels, Some(records[0].cumulative_time_s));
    assert!(v.iter().any(|x| matches!(x, Violation::ConcurrentUploads { round: 1, .. })));
    assert!(v.iter().any(|x| matches!(x, Violation::LateClient { round: 2, .. })));
    assert!(v.iter().any(|x| matches!(x, Violation::CumulativeTime { round: 2, .. })));
    assert!(v.iter().any(|x| matches!(x, Violation::Budget { round: 2, .. })));
}
