//! Client selection and upload scheduling.
//!
//! The proposed strategy selects every member of each cluster that has not
//! reached its stopping point, plus the fastest member of each stopped
//! cluster. Selections larger than the sub-channel count are served by
//! bandwidth reuse: participants are sorted by estimated latency, chunked into
//! aggregation sets of at most `N`, and the client at position `p` of set `j`
//! uploads on sub-channel `p` once the position-`p` client of set `j - 1` has
//! finished.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{stream, StreamTag};
use crate::wireless::Latency;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[serde(alias = "proposed")]
    ProposedTwoPhase,
    Random,
    BestChannel,
    #[serde(alias = "best_l2_norm")]
    BestL2norm,
    MaxSamples,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::ProposedTwoPhase,
        StrategyKind::Random,
        StrategyKind::BestChannel,
        StrategyKind::BestL2norm,
        StrategyKind::MaxSamples,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::ProposedTwoPhase => "proposed_two_phase",
            StrategyKind::Random => "random",
            StrategyKind::BestChannel => "best_channel",
            StrategyKind::BestL2norm => "best_l2norm",
            StrategyKind::MaxSamples => "max_samples",
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            Error::invalid(format!(
                "unknown strategy `{s}` (expected one of: {})",
                StrategyKind::ALL.map(|k| k.name()).join(", ")
            ))
        })
    }
}

/// Number of aggregation sets `ceil(|Omega_r| / N)`.
pub fn aggregation_count(selected: usize, subchannels: usize) -> Result<usize> {
    if selected == 0 || subchannels == 0 {
        return Err(Error::invalid(format!(
            "aggregation_count needs positive inputs (|Omega|={selected}, N={subchannels})"
        )));
    }
    Ok(selected.div_ceil(subchannels))
}

/// Consecutive chunks of `subchannels` clients, preserving the input order.
pub fn build_aggregation_sets(ordered: &[usize], subchannels: usize) -> Result<Vec<Vec<usize>>> {
    if ordered.is_empty() {
        return Err(Error::invalid("cannot build aggregation sets for an empty selection"));
    }
    if subchannels == 0 {
        return Err(Error::invalid("subchannels must be at least 1"));
    }
    Ok(ordered.chunks(subchannels).map(<[usize]>::to_vec).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadSlot {
    pub client: usize,
    pub set: usize,
    pub subchannel: usize,
    pub compute_end: f64,
    pub upload_start: f64,
    pub upload_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub slots: Vec<UploadSlot>,
    /// Round deadline `T_r`, measured from the round start at `t = 0`.
    pub deadline_s: f64,
}

/// Upload timeline with sub-channel reuse across aggregation sets.
///
/// All participants start computing at `t = 0`.
pub fn pipeline_timeline(
    sets: &[Vec<usize>],
    latency: &BTreeMap<usize, Latency>,
    subchannels: usize,
) -> Result<Timeline> {
    if sets.is_empty() {
        return Err(Error::invalid("empty aggregation plan"));
    }
    let mut channel_free = vec![0.0f64; subchannels];
    let mut slots = Vec::new();
    for (j, set) in sets.iter().enumerate() {
        if set.is_empty() || set.len() > subchannels {
            return Err(Error::invalid(format!(
                "aggregation set {j} has {} members for {subchannels} sub-channels",
                set.len()
            )));
        }
        for (p, &client) in set.iter().enumerate() {
            let l = latency
                .get(&client)
                .ok_or_else(|| Error::invalid(format!("no latency for client {client}")))?;
            if !(l.compute_s >= 0.0 && l.upload_s >= 0.0 && l.total().is_finite()) {
                return Err(Error::invalid(format!("invalid latency for client {client}")));
            }
            let upload_start = l.compute_s.max(channel_free[p]);
            let upload_end = upload_start + l.upload_s;
            channel_free[p] = upload_end;
            slots.push(UploadSlot {
                client,
                set: j,
                subchannel: p,
                compute_end: l.compute_s,
                upload_start,
                upload_end,
            });
        }
    }
    let deadline_s = slots
        .iter()
        .map(|s| s.upload_end)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Timeline { slots, deadline_s })
}

/// Peak number of uploads in flight at any instant. Intervals are half-open,
/// so an upload ending exactly when another starts does not overlap it.
pub fn max_concurrent_uploads(slots: &[UploadSlot]) -> usize {
    let mut events: Vec<(f64, i32)> = Vec::with_capacity(slots.len() * 2);
    for s in slots {
        if s.upload_end > s.upload_start {
            events.push((s.upload_start, 1));
            events.push((s.upload_end, -1));
        }
    }
    // Ends sort before starts at equal times.
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut cur = 0i32;
    let mut peak = 0i32;
    for (_, d) in events {
        cur += d;
        peak = peak.max(cur);
    }
    peak as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    pub round: usize,
    pub strategy: StrategyKind,
    /// Selected clients in upload order (ascending estimated latency).
    pub selected: Vec<usize>,
    pub aggregation_sets: Vec<Vec<usize>>,
    pub slots: Vec<UploadSlot>,
    pub deadline_s: f64,
}

impl ScheduleDecision {
    pub fn build(
        round: usize,
        strategy: StrategyKind,
        ordered: Vec<usize>,
        latency: &BTreeMap<usize, Latency>,
        subchannels: usize,
    ) -> Result<Self> {
        let aggregation_sets = build_aggregation_sets(&ordered, subchannels)?;
        let timeline = pipeline_timeline(&aggregation_sets, latency, subchannels)?;
        Ok(Self {
            round,
            strategy,
            selected: ordered,
            aggregation_sets,
            slots: timeline.slots,
            deadline_s: timeline.deadline_s,
        })
    }
}

/// A leaf cluster as seen by the scheduler.
#[derive(Debug, Clone)]
pub struct ClusterView {
    pub members: Vec<usize>,
    pub stopped: bool,
}

/// Everything a strategy may look at. Per-client slices are indexed by id.
#[derive(Debug, Clone)]
pub struct RoundState<'a> {
    pub round: usize,
    pub seed: u64,
    pub subchannels: usize,
    pub clusters: &'a [ClusterView],
    pub latency: &'a [f64],
    pub gains: &'a [f64],
    /// Most recent `||dw_k||` each client reported, if any.
    pub update_norms: &'a [Option<f64>],
    pub samples: &'a [usize],
}

impl RoundState<'_> {
    fn num_clients(&self) -> usize {
        self.latency.len()
    }
}

/// Top `n` ids by descending key; ties go to the lower id.
fn top_n_by(keys: impl Iterator<Item = (usize, f64)>, n: usize) -> Vec<usize> {
    let mut v: Vec<(usize, f64)> = keys.collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = v.into_iter().take(n).map(|(k, _)| k).collect();
    out.sort_unstable();
    out
}

fn random_subset(state: &RoundState<'_>) -> Vec<usize> {
    let k = state.num_clients();
    let n = state.subchannels.min(k);
    let mut rng = stream(state.seed, StreamTag::Select, 0, state.round as u64);
    let mut out = sample(&mut rng, k, n).into_vec();
    out.sort_unstable();
    out
}

/// Chooses `Omega_r`, returned in ascending client id.
pub fn select(strategy: StrategyKind, state: &RoundState<'_>) -> Result<Vec<usize>> {
    let k = state.num_clients();
    if k == 0 {
        return Err(Error::invalid("no clients to select from"));
    }
    if state.gains.len() != k || state.update_norms.len() != k || state.samples.len() != k {
        return Err(Error::invalid("per-client round state has inconsistent lengths"));
    }
    let n = state.subchannels.min(k);
    let out = match strategy {
        StrategyKind::ProposedTwoPhase => {
            let mut out = Vec::new();
            for c in state.clusters {
                if c.stopped {
                    let fastest = c
                        .members
                        .iter()
                        .copied()
                        .min_by(|&a, &b| state.latency[a].total_cmp(&state.latency[b]).then(a.cmp(&b)));
                    out.extend(fastest);
                } else {
                    out.extend_from_slice(&c.members);
                }
            }
            out.sort_unstable();
            out.dedup();
            out
        }
        StrategyKind::Random => random_subset(state),
        StrategyKind::BestChannel => top_n_by(state.gains.iter().copied().enumerate(), n),
        StrategyKind::BestL2norm => {
            if state.update_norms.iter().all(Option::is_none) {
                random_subset(state)
            } else {
                // Clients that never reported rank below every reported norm.
                top_n_by(
                    state
                        .update_norms
                        .iter()
                        .enumerate()
                        .map(|(i, v)| (i, v.unwrap_or(f64::NEG_INFINITY))),
                    n,
                )
            }
        }
        StrategyKind::MaxSamples => {
            top_n_by(state.samples.iter().map(|&d| d as f64).enumerate(), n)
        }
    };
    Ok(out)
}

/// Sorts a selection by ascending latency estimate, ties to the lower id.
pub fn order_by_latency(mut selected: Vec<usize>, latency: &[f64]) -> Vec<usize> {
    selected.sort_by(|&a, &b| latency[a].total_cmp(&latency[b]).then(a.cmp(&b)));
    selected
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat(c: f64, u: f64) -> Latency {
        Latency {
            compute_s: c,
            upload_s: u,
        }
    }

    #[test]
    fn aggregation_count_examples() {
        assert_eq!(aggregation_count(20, 10).unwrap(), 2);
        assert_eq!(aggregation_count(10, 10).unwrap(), 1);
        assert_eq!(aggregation_count(23, 10).unwrap(), 3);
        assert!(aggregation_count(0, 10).is_err());
        assert!(aggregation_count(3, 0).is_err());
    }

    #[test]
    fn aggregation_sets_follow_index_pattern() {
        assert_eq!(
            build_aggregation_sets(&[1, 2, 3, 4], 2).unwrap(),
            vec![vec![1, 2], vec![3, 4]]
        );
        assert_eq!(build_aggregation_sets(&[7, 8], 2).unwrap(), vec![vec![7, 8]]);
        let sets = build_aggregation_sets(&[5, 4, 3, 2, 1], 2).unwrap();
        assert_eq!(sets.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        assert_eq!(sets.concat(), vec![5, 4, 3, 2, 1]);
        assert!(build_aggregation_sets(&[], 2).is_err());
    }

    #[test]
    fn single_set_deadline_is_slowest_total() {
        let lat: BTreeMap<_, _> = [(0, lat(0.1, 0.2)), (1, lat(0.5, 0.1)), (2, lat(0.0, 0.4))].into();
        let t = pipeline_timeline(&[vec![0, 1, 2]], &lat, 3).unwrap();
        assert!((t.deadline_s - 0.6).abs() < 1e-15);
    }

    #[test]
    fn serialized_reuse_on_one_subchannel() {
        let lat: BTreeMap<_, _> = [(0, lat(0.0, 1.0)), (1, lat(0.0, 1.0))].into();
        let t = pipeline_timeline(&[vec![0], vec![1]], &lat, 1).unwrap();
        assert_eq!(t.deadline_s, 2.0);
        assert_eq!(t.slots[1].upload_start, 1.0);
    }

    #[test]
    fn late_compute_starts_upload_at_compute_end() {
        let lat: BTreeMap<_, _> = [(0, lat(0.0, 1.0)), (1, lat(3.0, 1.0))].into();
        let t = pipeline_timeline(&[vec![0], vec![1]], &lat, 1).unwrap();
        assert_eq!(t.slots[1].upload_start, 3.0);
        assert_eq!(t.deadline_s, 4.0);
    }

    #[test]
    fn concurrency_counts_half_open_intervals() {
        let lat: BTreeMap<_, _> = (0..6).map(|i| (i, lat(0.0, 1.0))).collect();
        let sets = build_aggregation_sets(&[0, 1, 2, 3, 4, 5], 2).unwrap();
        let t = pipeline_timeline(&sets, &lat, 2).unwrap();
        assert_eq!(max_concurrent_uploads(&t.slots), 2);
        assert_eq!(t.deadline_s, 3.0);
    }

    fn state<'a>(
        clusters: &'a [ClusterView],
        latency: &'a [f64],
        gains: &'a [f64],
        norms: &'a [Option<f64>],
        samples: &'a [usize],
        n: usize,
    ) -> RoundState<'a> {
        RoundState {
            round: 1,
            seed: 3,
            subchannels: n,
            clusters,
            latency,
            gains,
            update_norms: norms,
            samples,
        }
    }

    #[test]
    fn proposed_selects_everyone_before_stopping() {
        let k = 15;
        let clusters = [ClusterView {
            members: (0..k).collect(),
            stopped: false,
        }];
        let lat: Vec<f64> = (0..k).map(|i| i as f64).collect();
        let zeros = vec![0.0; k];
        let norms = vec![None; k];
        let samples = vec![10; k];
        let s = state(&clusters, &lat, &zeros, &norms, &samples, 10);
        assert_eq!(select(StrategyKind::ProposedTwoPhase, &s).unwrap(), (0..k).collect::<Vec<_>>());
    }

    #[test]
    fn stopped_cluster_contributes_its_fastest_member() {
        let k = 10;
        let clusters = [
            ClusterView {
                members: vec![2, 5, 9],
                stopped: true,
            },
            ClusterView {
                members: vec![0, 1, 3, 4, 6, 7, 8],
                stopped: false,
            },
        ];
        let mut lat = vec![0.5; k];
        lat[2] = 2.0;
        lat[5] = 1.0;
        lat[9] = 3.0;
        let zeros = vec![0.0; k];
        let norms = vec![None; k];
        let samples = vec![10; k];
        let s = state(&clusters, &lat, &zeros, &norms, &samples, 4);
        let sel = select(StrategyKind::ProposedTwoPhase, &s).unwrap();
        assert!(sel.contains(&5) && !sel.contains(&2) && !sel.contains(&9));
        assert_eq!(sel.len(), 8);
    }

    #[test]
    fn baselines_pick_top_n() {
        let k = 6;
        let clusters = [ClusterView {
            members: (0..k).collect(),
            stopped: false,
        }];
        let lat = vec![1.0; k];
        let gains = [0.1, 0.6, 0.3, 0.5, 0.2, 0.4];
        let norms = [Some(1.0), None, Some(3.0), Some(2.0), Some(0.5), Some(2.5)];
        let samples = [10, 60, 30, 50, 20, 40];
        let s = state(&clusters, &lat, &gains, &norms, &samples, 3);
        assert_eq!(select(StrategyKind::BestChannel, &s).unwrap(), vec![1, 3, 5]);
        assert_eq!(select(StrategyKind::BestL2norm, &s).unwrap(), vec![2, 3, 5]);
        assert_eq!(select(StrategyKind::MaxSamples, &s).unwrap(), vec![1, 3, 5]);
        let r = select(StrategyKind::Random, &s).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r, select(StrategyKind::Random, &s).unwrap());
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
        }
        assert_eq!("proposed".parse::<StrategyKind>().unwrap(), StrategyKind::ProposedTwoPhase);
        assert!("fastest".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn latency_order_breaks_ties_by_id() {
        assert_eq!(order_by_latency(vec![3, 1, 2], &[0.0, 1.0, 1.0, 0.5]), vec![3, 1, 2]);
    }
}
