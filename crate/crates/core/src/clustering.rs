//! Clustered FL engine: weighted averaging, cosine similarity of client
//! updates, split tests, exhaustive bipartitioning and the cluster tree.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;

/// Largest cluster the exhaustive bipartition will enumerate.
pub const MAX_BIPARTITION_MEMBERS: usize = 16;

/// `sum_k (D_k / D) w_k`, summed in ascending client id order.
///
/// Entries are `(client id, parameters, D_k)`.
pub fn federated_average(entries: &[(usize, &ParamVector, usize)]) -> Result<ParamVector> {
    if entries.is_empty() {
        return Err(Error::invalid("federated average of no updates"));
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by_key(|&i| entries[i].0);
    let total: usize = entries.iter().map(|e| e.2).sum();
    if total == 0 {
        return Err(Error::invalid("federated average with zero total samples"));
    }
    let dim = entries[0].1.dim();
    let mut acc = ParamVector::zeros(dim);
    for i in order {
        let (_, w, d) = entries[i];
        acc.axpy(d as f64 / total as f64, w)?;
    }
    Ok(acc)
}

/// `<a, b> / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateUpdate(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Symmetric pairwise cosine similarities over a set of clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    /// Client ids in ascending order; row `i` belongs to `ids[i]`.
    ids: Vec<usize>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_updates(updates: &[(usize, &ParamVector)]) -> Result<Self> {
        let mut sorted: Vec<(usize, &ParamVector)> = updates.to_vec();
        sorted.sort_by_key(|e| e.0);
        if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid("duplicate client id in similarity input"));
        }
        let n = sorted.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            if sorted[i].1.norm() == 0.0 {
                return Err(Error::DegenerateUpdate(format!(
                    "client {} sent a zero update",
                    sorted[i].0
                )));
            }
            values[i * n + i] = 1.0;
            for j in i + 1..n {
                let s = cosine_similarity(sorted[i].1, sorted[j].1)?;
                values[i * n + j] = s;
                values[j * n + i] = s;
            }
        }
        Ok(Self {
            ids: sorted.into_iter().map(|e| e.0).collect(),
            values,
        })
    }

    /// Builds a matrix from raw values; `values` is row-major `n x n` and
    /// must be symmetric.
    pub fn from_values(ids: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n = ids.len();
        if values.len() != n * n {
            return Err(Error::invalid("similarity values must be n x n"));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("similarity ids must be strictly ascending"));
        }
        for i in 0..n {
            for j in 0..n {
                let v = values[i * n + j];
                if !(-1.0..=1.0).contains(&v) || v != values[j * n + i] {
                    return Err(Error::invalid("similarity must be symmetric with entries in [-1, 1]"));
                }
            }
        }
        Ok(Self { ids, values })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ids.len() + j]
    }

    fn position(&self, id: usize) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }
}

/// Whether a cluster is near the joint stationary point while its members are
/// still far from their own: `|mean dw| < eps1` and `max_k |dw_k| > eps2`.
pub fn split_conditions(mean_update_norm: f64, member_norms: &[f64], eps1: f64, eps2: f64) -> bool {
    let max = member_norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mean_update_norm < eps1 && max > eps2
}

/// Stopping point: every member update is below `eps2`.
pub fn stopping_check(member_norms: &[f64], eps2: f64) -> bool {
    !member_norms.is_empty() && member_norms.iter().all(|&n| n < eps2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bipartition {
    pub c1: Vec<usize>,
    pub c2: Vec<usize>,
    pub cross_max: f64,
}

/// Exhaustive min-max-cross-similarity bipartition.
///
/// Among all splits into two non-empty sides, returns one minimizing the
/// largest similarity between the sides. Ties go to the lexicographically
/// smallest `c1` (ids ascending), which always holds the smallest id.
pub fn bipartition(s: &SimilarityMatrix) -> Result<Bipartition> {
    let n = s.len();
    if n < 2 {
        return Err(Error::invalid("bipartition needs at least two members"));
    }
    if n > MAX_BIPARTITION_MEMBERS {
        return Err(Error::SizeLimit {
            size: n,
            limit: MAX_BIPARTITION_MEMBERS,
        });
    }
    // Bit i of `mask` puts position i + 1 into c2; position 0 stays in c1.
    let full = 1u32 << (n - 1);
    let mut best: Option<(f64, u32)> = None;
    let mut in_c2 = vec![false; n];
    for mask in 1..full {
        for (i, flag) in in_c2.iter_mut().enumerate().skip(1) {
            *flag = mask & (1 << (i - 1)) != 0;
        }
        let mut cross = f64::NEG_INFINITY;
        for i in (0..n).filter(|&i| !in_c2[i]) {
            for j in (0..n).filter(|&j| in_c2[j]) {
                cross = cross.max(s.at(i, j));
            }
        }
        best = match best {
            None => Some((cross, mask)),
            Some((b, bm)) => match cross.total_cmp(&b) {
                Ordering::Less => Some((cross, mask)),
                Ordering::Equal if c1_lex_less(mask, bm, n) => Some((cross, mask)),
                _ => Some((b, bm)),
            },
        };
    }
    let (cross_max, mask) = best.expect("n >= 2 gives at least one split");
    let (mut c1, mut c2) = (Vec::new(), Vec::new());
    for (pos, &id) in s.ids().iter().enumerate() {
        if pos > 0 && mask & (1 << (pos - 1)) != 0 {
            c2.push(id);
        } else {
            c1.push(id);
        }
    }
    Ok(Bipartition { c1, c2, cross_max })
}

/// Lexicographic comparison of the c1 position lists encoded by two masks.
fn c1_lex_less(a: u32, b: u32, n: usize) -> bool {
    let side = |mask: u32| (0..n).filter(move |&p| p == 0 || mask & (1 << (p - 1)) == 0);
    side(a).lt(side(b))
}

/// How `grad F_I(k)` is estimated when computing `gamma_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GammaReference {
    /// Mean update of the whole side of the cut that holds `k`.
    SideMean,
    /// Mean unit-length update of the members on `k`'s side whose cosine
    /// similarity with `k` is at least `min_similarity` (always including
    /// `k`); `k`'s own update is unit-scaled too.
    AlignedDirections { min_similarity: f64 },
}

impl Default for GammaReference {
    fn default() -> Self {
        GammaReference::AlignedDirections { min_similarity: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaReport {
    pub max_gamma: f64,
    /// `sqrt((1 - cross_max) / 2)`.
    pub threshold: f64,
    pub accepted: bool,
    /// Set when the check could not be evaluated (zero mean or reference).
    pub degenerate: bool,
}

/// Validates a candidate split: accepted iff `max_k gamma_k` is below
/// `sqrt((1 - cross_max) / 2)`.
pub fn gamma_check(
    split: &Bipartition,
    updates: &BTreeMap<usize, &ParamVector>,
    cluster_mean: &ParamVector,
    reference: GammaReference,
) -> Result<GammaReport> {
    let threshold = ((1.0 - split.cross_max) / 2.0).max(0.0).sqrt();
    let reject = |max_gamma| GammaReport {
        max_gamma,
        threshold,
        accepted: false,
        degenerate: true,
    };
    if cluster_mean.norm() == 0.0 {
        return Ok(reject(f64::INFINITY));
    }
    let get = |id: &usize| {
        updates
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no update for client {id}")))
    };
    let mut max_gamma = 0.0f64;
    let unit = |v: &ParamVector| {
        let n = v.norm();
        if n > 0.0 {
            v.scale(1.0 / n)
        } else {
            v.clone()
        }
    };
    for side in [&split.c1, &split.c2] {
        let mut side_updates: Vec<ParamVector> = side.iter().map(|k| get(k).cloned()).collect::<Result<_>>()?;
        if let GammaReference::AlignedDirections { .. } = reference {
            side_updates = side_updates.iter().map(unit).collect();
        }
        let side_mean = ParamVector::mean(&side_updates)?;
        for (i, own) in side_updates.iter().enumerate() {
            let reference_grad = match reference {
                GammaReference::SideMean => side_mean.clone(),
                GammaReference::AlignedDirections { min_similarity } => {
                    let mut aligned = Vec::new();
                    for (j, other) in side_updates.iter().enumerate() {
                        if i == j || own.dot(other)? >= min_similarity {
                            aligned.push(other);
                        }
                    }
                    ParamVector::mean(aligned)?
                }
            };
            let denom = reference_grad.norm();
            if denom == 0.0 {
                return Ok(reject(f64::INFINITY));
            }
            max_gamma = max_gamma.max(reference_grad.sub(own)?.norm() / denom);
        }
    }
    Ok(GammaReport {
        max_gamma,
        threshold,
        accepted: max_gamma < threshold,
        degenerate: false,
    })
}

/// `min within-part similarity - max cross-part similarity`, or `None` when
/// either side of the difference has no pairs.
pub fn separation_gap(s: &SimilarityMatrix, partition: &[Vec<usize>]) -> Result<Option<f64>> {
    let mut part_of = vec![usize::MAX; s.len()];
    for (p, members) in partition.iter().enumerate() {
        for &id in members {
            let pos = s
                .position(id)
                .ok_or_else(|| Error::invalid(format!("client {id} not in similarity matrix")))?;
            part_of[pos] = p;
        }
    }
    if part_of.contains(&usize::MAX) {
        return Err(Error::invalid("partition does not cover the similarity matrix"));
    }
    let mut within_min = f64::INFINITY;
    let mut cross_max = f64::NEG_INFINITY;
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            let v = s.at(i, j);
            if part_of[i] == part_of[j] {
                within_min = within_min.min(v);
            } else {
                cross_max = cross_max.max(v);
            }
        }
    }
    if within_min.is_infinite() || cross_max.is_infinite() {
        return Ok(None);
    }
    Ok(Some(within_min - cross_max))
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("labelings differ in length"));
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let pairs = |v: u64| (v * v.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&v| pairs(v)).sum();
    let sum_rows: f64 = rows.values().map(|&v| pairs(v)).sum();
    let sum_cols: f64 = cols.values().map(|&v| pairs(v)).sum();
    let total = pairs(n as u64);
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if max_index == expected {
        // Both labelings trivial in the same way.
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}

/// How member updates are combined into the cluster mean tested against
/// `eps1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeanWeighting {
    /// `(1/|c|) sum dw_k`.
    Unweighted,
    /// `sum (D_k / D_c) dw_k`, the step the aggregated model actually takes.
    #[default]
    BySamples,
}

/// Scale applied to a client's update before any norm is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScale {
    /// The raw weight delta `dw_k`.
    Raw,
    /// `dw_k / tau_k`, the mean step of client `k`'s local run. Keeps update
    /// norms comparable when shard sizes, and with them local step counts,
    /// differ by orders of magnitude.
    #[default]
    PerStep,
}

/// Relative or absolute split thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Thresholds {
    /// `eps1 = eps1_factor * mean |dw_k|` at the first split consideration,
    /// `eps2 = eps2_factor * eps1`.
    Relative { eps1_factor: f64, eps2_factor: f64 },
    Absolute { eps1: f64, eps2: f64 },
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds::Relative {
            eps1_factor: 0.4,
            eps2_factor: 1.6,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Thresholds::Relative {
                eps1_factor,
                eps2_factor,
            } => eps1_factor >= 0.0 && eps2_factor > 0.0 && eps1_factor.is_finite() && eps2_factor.is_finite(),
            Thresholds::Absolute { eps1, eps2 } => eps1 >= 0.0 && eps2 > 0.0 && eps1.is_finite() && eps2.is_finite(),
        };
        if !ok {
            return Err(Error::invalid("thresholds need eps1 >= 0 and eps2 > 0"));
        }
        Ok(())
    }

    /// Resolves `(eps1, eps2)` given the mean member update norm observed at
    /// the first split consideration.
    pub fn resolve(&self, first_mean_norm: f64) -> (f64, f64) {
        match *self {
            Thresholds::Relative {
                eps1_factor,
                eps2_factor,
            } => {
                let eps1 = eps1_factor * first_mean_norm;
                (eps1, eps2_factor * eps1)
            }
            Thresholds::Absolute { eps1, eps2 } => (eps1, eps2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Active,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterNode {
    pub id: usize,
    pub members: Vec<usize>,
    pub model: ParamVector,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub status: NodeStatus,
    pub created_round: usize,
}

impl ClusterNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Membership view of a node, without the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSnapshot {
    pub id: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub members: Vec<usize>,
    pub status: NodeStatus,
    pub created_round: usize,
}

/// Parameter tree. Node 0 is the root (conventional FL model); a node's
/// model is frozen once it splits and both children start from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    nodes: Vec<ClusterNode>,
}

impl ClusterTree {
    pub fn new(num_clients: usize, model: ParamVector) -> Self {
        Self {
            nodes: vec![ClusterNode {
                id: 0,
                members: (0..num_clients).collect(),
                model,
                parent: None,
                children: Vec::new(),
                status: NodeStatus::Active,
                created_round: 0,
            }],
        }
    }

    pub fn root(&self) -> &ClusterNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: usize) -> &ClusterNode {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: usize) -> &mut ClusterNode {
        &mut self.nodes[id]
    }

    pub fn nodes(&self) -> &[ClusterNode] {
        &self.nodes
    }

    /// Leaf ids, ascending.
    pub fn leaves(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.is_leaf()).map(|n| n.id).collect()
    }

    pub fn split_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_leaf()).count()
    }

    pub fn all_stopped(&self) -> bool {
        self.nodes
            .iter()
            .filter(|n| n.is_leaf())
            .all(|n| n.status == NodeStatus::Stopped)
    }

    /// Leaf id per client.
    pub fn assignment(&self, num_clients: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; num_clients];
        for n in self.nodes.iter().filter(|n| n.is_leaf()) {
            for &k in &n.members {
                out[k] = n.id;
            }
        }
        out
    }

    /// Replaces leaf `id` by two children holding `c1` and `c2`.
    pub fn split_leaf(&mut self, id: usize, c1: Vec<usize>, c2: Vec<usize>, round: usize) -> Result<(usize, usize)> {
        let node = &self.nodes[id];
        if !node.is_leaf() {
            return Err(Error::invalid(format!("node {id} already split")));
        }
        if node.status == NodeStatus::Stopped {
            return Err(Error::invalid(format!("node {id} is stopped and cannot split")));
        }
        if c1.is_empty() || c2.is_empty() {
            return Err(Error::invalid("both sides of a split must be non-empty"));
        }
        let mut union: Vec<usize> = c1.iter().chain(&c2).copied().collect();
        union.sort_unstable();
        if union != node.members {
            return Err(Error::invalid(format!("split sides do not partition node {id}")));
        }
        let model = node.model.clone();
        let base = self.nodes.len();
        for (offset, mut members) in [c1, c2].into_iter().enumerate() {
            members.sort_unstable();
            self.nodes.push(ClusterNode {
                id: base + offset,
                members,
                model: model.clone(),
                parent: Some(id),
                children: Vec::new(),
                status: NodeStatus::Active,
                created_round: round,
            });
        }
        self.nodes[id].children = vec![base, base + 1];
        Ok((base, base + 1))
    }

    /// Checks that the leaves partition `0..num_clients`.
    pub fn check_partition(&self, num_clients: usize) -> Result<()> {
        let mut seen = vec![false; num_clients];
        for n in self.nodes.iter().filter(|n| n.is_leaf()) {
            for &k in &n.members {
                if k >= num_clients || seen[k] {
                    return Err(Error::invalid(format!("client {k} appears in two leaves")));
                }
                seen[k] = true;
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("client {k} is in no leaf")));
        }
        for n in &self.nodes {
            if n.status == NodeStatus::Stopped && !n.is_leaf() {
                return Err(Error::invalid(format!("stopped node {} has children", n.id)));
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<NodeSnapshot> {
        self.nodes
            .iter()
            .map(|n| NodeSnapshot {
                id: n.id,
                parent: n.parent,
                children: n.children.clone(),
                members: n.members.clone(),
                status: n.status,
                created_round: n.created_round,
            })
            .collect()
    }
}
