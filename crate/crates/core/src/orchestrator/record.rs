use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::NodeSnapshot;
use crate::scheduling::ScheduleDecision;

/// What changed in the tree during a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClusterEvent {
    Split {
        node: usize,
        children: [usize; 2],
        c1: Vec<usize>,
        c2: Vec<usize>,
        cross_max: f64,
        max_gamma: f64,
        gamma_threshold: f64,
        /// Over the participants that took part in the split decision;
        /// `None` when either side has no pairs.
        separation_gap: Option<f64>,
    },
    /// The split conditions held but the candidate cut was not accepted.
    SplitRejected {
        node: usize,
        cross_max: Option<f64>,
        max_gamma: Option<f64>,
        gamma_threshold: Option<f64>,
    },
    Stop {
        node: usize,
    },
}

/// Per-leaf statistics for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub node: usize,
    pub participants: Vec<usize>,
    /// `|(1/|c|) sum dw_k|` over this round's participants.
    pub mean_update_norm: f64,
    pub max_update_norm: f64,
    /// `D_k`-weighted train loss of the aggregated model over all members;
    /// only on evaluation rounds.
    pub train_loss: Option<f64>,
    /// Test accuracy pooled over all members' test shards.
    pub test_accuracy: Option<f64>,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub learning_rate: f64,
    pub schedule: ScheduleDecision,
    /// `T_r`.
    pub deadline_s: f64,
    pub cumulative_time_s: f64,
    pub aggregation_set_count: usize,
    /// Over all participants of the round.
    pub mean_update_norm: f64,
    pub max_update_norm: f64,
    /// `(eps1, eps2)` in force for this round's cluster maintenance.
    pub thresholds: (f64, f64),
    pub clusters: Vec<ClusterStats>,
    pub events: Vec<ClusterEvent>,
    /// Accuracy of each client's leaf model on its test shard, on evaluation
    /// rounds.
    pub client_accuracy: Option<BTreeMap<usize, f64>>,
    pub tree: Vec<NodeSnapshot>,
}

impl RoundRecord {
    pub fn has_split(&self) -> bool {
        self.events.iter().any(|e| matches!(e, ClusterEvent::Split { .. }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    AllStopped,
    MaxRounds,
    TimeBudget,
}
