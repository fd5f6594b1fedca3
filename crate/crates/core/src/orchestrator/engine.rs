use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::clustering::{
    bipartition, cosine_similarity, federated_average, gamma_check, separation_gap, split_conditions,
    stopping_check, Bipartition, ClusterTree, MeanWeighting, NodeStatus, SimilarityMatrix, UpdateScale,
};
use crate::data::{self, FederatedDataset};
use crate::error::{Error, Result};
use crate::model::{self, local_train, LocalTrainOutcome};
use crate::params::ParamVector;
use crate::scheduling::{order_by_latency, select, ClusterView, RoundState, ScheduleDecision};
use crate::seed::{stream, StreamTag};
use crate::wireless::{channel_gain, total_latency, ClientProfile, Latency};

use super::config::ExperimentConfig;
use super::record::{ClusterEvent, ClusterStats, RoundRecord, StopReason};

pub struct RunOutcome {
    pub dataset: FederatedDataset,
    pub profiles: Vec<ClientProfile>,
    /// Root holds the conventional FL model, leaves the specialized ones.
    pub tree: ClusterTree,
    pub records: Vec<RoundRecord>,
    pub stop_reason: StopReason,
}

impl RunOutcome {
    pub fn total_time_s(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cumulative_time_s)
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_with_observer(cfg, |_| Ok(()))
}

/// Runs the simulation, handing each finished round to `observer` before
/// the next one starts. An observer error aborts the run.
pub fn run_with_observer<F>(cfg: &ExperimentConfig, mut observer: F) -> Result<RunOutcome>
where
    F: FnMut(&RoundRecord) -> Result<()>,
{
    cfg.validate()?;
    let dataset = data::generate(cfg.num_clients, &cfg.data, cfg.seed)?;
    let mut sim = Simulation::new(cfg, &dataset)?;
    let mut records = Vec::new();
    let mut stop_reason = StopReason::MaxRounds;
    for round in 1..=cfg.max_rounds {
        if sim.tree.all_stopped() {
            stop_reason = StopReason::AllStopped;
            break;
        }
        match sim.round(round, records.last().map_or(0.0, |r: &RoundRecord| r.cumulative_time_s))? {
            Some(record) => {
                observer(&record)?;
                records.push(record);
            }
            None => {
                stop_reason = StopReason::TimeBudget;
                break;
            }
        }
    }
    if stop_reason == StopReason::MaxRounds && sim.tree.all_stopped() {
        stop_reason = StopReason::AllStopped;
    }
    Ok(RunOutcome {
        tree: sim.tree,
        profiles: sim.profiles,
        dataset,
        records,
        stop_reason,
    })
}

struct Simulation<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a FederatedDataset,
    sizes: Vec<usize>,
    profiles: Vec<ClientProfile>,
    tree: ClusterTree,
    last_norm: Vec<Option<f64>>,
    last_delta: Vec<Option<ParamVector>>,
    eps: Option<(f64, f64)>,
}

impl<'a> Simulation<'a> {
    fn new(cfg: &'a ExperimentConfig, data: &'a FederatedDataset) -> Result<Self> {
        let k = cfg.num_clients;
        let sizes = data.train_sizes();
        let bits = cfg.wireless.model_bits_for(data.spec.param_count());
        let profiles = (0..k)
            .map(|id| ClientProfile::generate(id, sizes[id], bits, &cfg.wireless, cfg.seed))
            .collect();
        let init = data.spec.init_params(&mut stream(cfg.seed, StreamTag::Init, 0, 0));
        Ok(Self {
            cfg,
            data,
            sizes,
            profiles,
            tree: ClusterTree::new(k, init),
            last_norm: vec![None; k],
            last_delta: vec![None; k],
            eps: None,
        })
    }

    /// True latencies (`None` if unreachable) and the server's estimates.
    fn latencies(&self, round: usize, gains: &[f64]) -> Result<(Vec<Option<Latency>>, Vec<f64>)> {
        let w = &self.cfg.wireless;
        let plan = w.plan();
        let mut truth = Vec::with_capacity(self.profiles.len());
        let mut estimate = Vec::with_capacity(self.profiles.len());
        for (p, &g) in self.profiles.iter().zip(gains) {
            match total_latency(p, g, &plan, w.noise_w, self.cfg.epochs) {
                Ok(l) => {
                    let mut est = l.total();
                    if w.latency_noise_std > 0.0 {
                        let mut rng = stream(self.cfg.seed, StreamTag::LatencyNoise, p.id as u64, round as u64);
                        let z: f64 = StandardNormal.sample(&mut rng);
                        est *= (1.0 + w.latency_noise_std * z).max(0.0);
                    }
                    truth.push(Some(l));
                    estimate.push(est);
                }
                Err(Error::UnreachableClient(_)) => {
                    truth.push(None);
                    estimate.push(f64::INFINITY);
                }
                Err(e) => return Err(e),
            }
        }
        Ok((truth, estimate))
    }

    fn schedule(&self, round: usize) -> Result<ScheduleDecision> {
        let cfg = self.cfg;
        let gains: Vec<f64> = self
            .profiles
            .iter()
            .map(|p| channel_gain(p, round, cfg.seed, &cfg.wireless))
            .collect();
        let (truth, estimate) = self.latencies(round, &gains)?;
        let views: Vec<ClusterView> = self
            .tree
            .leaves()
            .into_iter()
            .map(|id| {
                let n = self.tree.node(id);
                ClusterView {
                    members: n.members.clone(),
                    stopped: n.status == NodeStatus::Stopped,
                }
            })
            .collect();
        let state = RoundState {
            round,
            seed: cfg.seed,
            subchannels: cfg.wireless.subchannels,
            clusters: &views,
            latency: &estimate,
            gains: &gains,
            update_norms: &self.last_norm,
            samples: &self.sizes,
        };
        let selected: Vec<usize> = select(cfg.strategy, &state)?
            .into_iter()
            .filter(|&k| truth[k].is_some())
            .collect();
        if selected.is_empty() {
            return Err(Error::invalid(format!("round {round}: no reachable client selected")));
        }
        let latency: BTreeMap<usize, Latency> = selected
            .iter()
            .map(|&k| (k, truth[k].expect("filtered to reachable")))
            .collect();
        let ordered = order_by_latency(selected, &estimate);
        ScheduleDecision::build(round, cfg.strategy, ordered, &latency, cfg.wireless.subchannels)
    }

    fn train(&self, round: usize, participants: &[usize]) -> Result<Vec<LocalTrainOutcome>> {
        let cfg = self.cfg;
        let assignment = self.tree.assignment(cfg.num_clients);
        let lr = cfg.learning_rate_at(round);
        let job = |&k: &usize| {
            let start = &self.tree.node(assignment[k]).model;
            let mut rng = stream(cfg.seed, StreamTag::Train, k as u64, round as u64);
            local_train(start, &self.data.shards[&k].train, &self.data.spec, cfg.epochs, cfg.batch_size, lr, &mut rng)
        };
        if cfg.parallel {
            participants.par_iter().map(job).collect()
        } else {
            participants.iter().map(job).collect()
        }
    }

    /// Plays one round. `None` means the round would overrun the time budget
    /// and was discarded.
    fn round(&mut self, round: usize, elapsed_s: f64) -> Result<Option<RoundRecord>> {
        let cfg = self.cfg;
        let schedule = self.schedule(round)?;
        let deadline_s = schedule.deadline_s;
        if let Some(budget) = cfg.time_budget_s {
            if elapsed_s + deadline_s > budget {
                return Ok(None);
            }
        }
        let mut participants = schedule.selected.clone();
        participants.sort_unstable();
        let outcomes: BTreeMap<usize, LocalTrainOutcome> =
            participants.iter().copied().zip(self.train(round, &participants)?).collect();

        for (&k, o) in &outcomes {
            self.last_norm[k] = Some(o.delta.norm());
            self.last_delta[k] = Some(o.delta.clone());
        }
        // Updates as seen by the split and stopping tests.
        let scale = |o: &LocalTrainOutcome| match cfg.update_scale {
            UpdateScale::Raw => 1.0,
            UpdateScale::PerStep => o.steps as f64,
        };
        let scaled: BTreeMap<usize, ParamVector> =
            outcomes.iter().map(|(&k, o)| (k, o.delta.scale(1.0 / scale(o)))).collect();
        let norms: Vec<f64> = scaled.values().map(ParamVector::norm).collect();
        let (eps1, eps2) = *self.eps.get_or_insert_with(|| {
            let mean = norms.iter().sum::<f64>() / norms.len() as f64;
            cfg.thresholds.resolve(mean)
        });
        let all: Vec<usize> = outcomes.keys().copied().collect();
        let overall_mean = self.cluster_mean(&all, &outcomes, &scaled)?.norm();
        let overall_max = norms.iter().copied().fold(0.0, f64::max);

        let mut events = Vec::new();
        let mut stats = Vec::new();
        for leaf in self.tree.leaves() {
            let members = self.tree.node(leaf).members.clone();
            let parts: Vec<usize> = members.iter().copied().filter(|k| outcomes.contains_key(k)).collect();
            if parts.is_empty() {
                continue;
            }
            let entries: Vec<(usize, &ParamVector, usize)> =
                parts.iter().map(|&k| (k, &outcomes[&k].params, self.sizes[k])).collect();
            self.tree.node_mut(leaf).model = federated_average(&entries)?;

            let updates: BTreeMap<usize, &ParamVector> = parts.iter().map(|&k| (k, &scaled[&k])).collect();
            let mean_delta = self.cluster_mean(&parts, &outcomes, &scaled)?;
            let part_norms: Vec<f64> = updates.values().map(|d| d.norm()).collect();
            stats.push(ClusterStats {
                node: leaf,
                participants: parts.clone(),
                mean_update_norm: mean_delta.norm(),
                max_update_norm: part_norms.iter().copied().fold(0.0, f64::max),
                train_loss: None,
                test_accuracy: None,
            });
            if self.tree.node(leaf).status == NodeStatus::Stopped || parts.len() < members.len().min(2) {
                continue;
            }
            if stopping_check(&part_norms, eps2) {
                self.tree.node_mut(leaf).status = NodeStatus::Stopped;
                events.push(ClusterEvent::Stop { node: leaf });
            } else if parts.len() >= 2 && split_conditions(mean_delta.norm(), &part_norms, eps1, eps2) {
                events.push(self.try_split(leaf, round, &updates, &mean_delta)?);
            }
        }
        self.tree.check_partition(cfg.num_clients)?;

        let evaluate = round.is_multiple_of(cfg.eval_every) || round == cfg.max_rounds;
        let client_accuracy = if evaluate {
            Some(self.evaluate(&mut stats)?)
        } else {
            None
        };
        Ok(Some(RoundRecord {
            round,
            learning_rate: cfg.learning_rate_at(round),
            deadline_s,
            cumulative_time_s: elapsed_s + deadline_s,
            aggregation_set_count: schedule.aggregation_sets.len(),
            schedule,
            mean_update_norm: overall_mean,
            max_update_norm: overall_max,
            thresholds: (eps1, eps2),
            clusters: stats,
            events,
            client_accuracy,
            tree: self.tree.snapshot(),
        }))
    }

    /// Cluster update tested against `eps1`. Weighted by samples it is the
    /// step the aggregated model takes, divided under per-step scaling by
    /// the sample-weighted mean step count.
    fn cluster_mean(
        &self,
        parts: &[usize],
        outcomes: &BTreeMap<usize, LocalTrainOutcome>,
        scaled: &BTreeMap<usize, ParamVector>,
    ) -> Result<ParamVector> {
        match self.cfg.split_mean {
            MeanWeighting::Unweighted => ParamVector::mean(parts.iter().map(|k| &scaled[k])),
            MeanWeighting::BySamples => {
                let entries: Vec<(usize, &ParamVector, usize)> =
                    parts.iter().map(|&k| (k, &outcomes[&k].delta, self.sizes[k])).collect();
                let step = federated_average(&entries)?;
                Ok(match self.cfg.update_scale {
                    UpdateScale::Raw => step,
                    UpdateScale::PerStep => {
                        let total: usize = parts.iter().map(|&k| self.sizes[k]).sum();
                        let steps: f64 = parts
                            .iter()
                            .map(|&k| self.sizes[k] as f64 * outcomes[&k].steps as f64)
                            .sum::<f64>()
                            / total as f64;
                        step.scale(1.0 / steps)
                    }
                })
            }
        }
    }

    fn try_split(
        &mut self,
        leaf: usize,
        round: usize,
        updates: &BTreeMap<usize, &ParamVector>,
        mean_delta: &ParamVector,
    ) -> Result<ClusterEvent> {
        let rejected = |cross_max, max_gamma, gamma_threshold| ClusterEvent::SplitRejected {
            node: leaf,
            cross_max,
            max_gamma,
            gamma_threshold,
        };
        let list: Vec<(usize, &ParamVector)> = updates.iter().map(|(&k, &d)| (k, d)).collect();
        let sim = match SimilarityMatrix::from_updates(&list) {
            Ok(s) => s,
            Err(Error::DegenerateUpdate(_)) => return Ok(rejected(None, None, None)),
            Err(e) => return Err(e),
        };
        let cut = bipartition(&sim)?;
        let gamma = gamma_check(&cut, updates, mean_delta, self.cfg.gamma_reference)?;
        if !gamma.accepted {
            return Ok(rejected(
                Some(cut.cross_max),
                gamma.max_gamma.is_finite().then_some(gamma.max_gamma),
                Some(gamma.threshold),
            ));
        }
        let gap = separation_gap(&sim, &[cut.c1.clone(), cut.c2.clone()])?;
        let (c1, c2) = self.assign_absent(leaf, &cut, updates)?;
        let (a, b) = self.tree.split_leaf(leaf, c1.clone(), c2.clone(), round)?;
        Ok(ClusterEvent::Split {
            node: leaf,
            children: [a, b],
            c1,
            c2,
            cross_max: cut.cross_max,
            max_gamma: gamma.max_gamma,
            gamma_threshold: gamma.threshold,
            separation_gap: gap,
        })
    }

    /// Extends a cut over participants to all members of `leaf`. An absent
    /// member joins the side whose mean update is most similar to its last
    /// reported update; one that never reported joins the larger side.
    fn assign_absent(
        &self,
        leaf: usize,
        cut: &Bipartition,
        updates: &BTreeMap<usize, &ParamVector>,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let side_mean = |side: &[usize]| ParamVector::mean(side.iter().map(|k| updates[k]));
        let (m1, m2) = (side_mean(&cut.c1)?, side_mean(&cut.c2)?);
        let (mut c1, mut c2) = (cut.c1.clone(), cut.c2.clone());
        for &k in &self.tree.node(leaf).members {
            if updates.contains_key(&k) {
                continue;
            }
            let to_c1 = match &self.last_delta[k] {
                Some(d) => {
                    let s1 = cosine_similarity(d, &m1).unwrap_or(f64::NEG_INFINITY);
                    let s2 = cosine_similarity(d, &m2).unwrap_or(f64::NEG_INFINITY);
                    s1 >= s2
                }
                None => cut.c1.len() >= cut.c2.len(),
            };
            if to_c1 {
                c1.push(k);
            } else {
                c2.push(k);
            }
        }
        c1.sort_unstable();
        c2.sort_unstable();
        Ok((c1, c2))
    }

    fn evaluate(&self, stats: &mut [ClusterStats]) -> Result<BTreeMap<usize, f64>> {
        let spec = &self.data.spec;
        let mut per_client = BTreeMap::new();
        for leaf in self.tree.leaves() {
            let node = self.tree.node(leaf);
            let (mut loss_sum, mut weight) = (0.0, 0usize);
            let (mut correct, mut total) = (0.0, 0usize);
            for &k in &node.members {
                let d = &self.data.shards[&k];
                loss_sum += model::loss(&node.model, &d.train, spec)? * d.train.len() as f64;
                weight += d.train.len();
                let acc = model::accuracy(&node.model, &d.test, spec)?;
                correct += acc * d.test.len() as f64;
                total += d.test.len();
                per_client.insert(k, acc);
            }
            // Leaves created this round have no stats entry yet.
            if let Some(s) = stats.iter_mut().find(|s| s.node == leaf) {
                s.train_loss = Some(loss_sum / weight as f64);
                s.test_accuracy = Some(correct / total as f64);
            }
        }
        Ok(per_client)
    }
}
