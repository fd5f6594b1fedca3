//! Synthetic federated datasets with a known partition into incongruent
//! distribution groups.
//!
//! All groups share one Gaussian-mixture feature source. Each dataset draws a
//! subset of `classes_per_client` mixture components that every client
//! samples from, which gives every shard the same label skew. Group `g`
//! labels component `j` as `relabel[(j + g) mod C]`, so two different groups
//! never agree on the label of a relabeled component. That contradiction in
//! `P(y | x)` is what makes the groups incongruent. Optionally the first few
//! active components keep `relabel[j]` in every group, a part of the task all
//! groups agree on.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DataShard, ModelSpec};
use crate::seed::{stream, StreamTag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SizeLaw {
    /// Pareto with the given shape and scale `min_samples`.
    PowerLaw { exponent: f64 },
    Uniform,
}

impl Default for SizeLaw {
    fn default() -> Self {
        SizeLaw::PowerLaw { exponent: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_groups: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden_dim: usize,
    pub classes_per_client: usize,
    /// How many of the active components keep the same label in every
    /// group. The rest are relabeled per group.
    pub shared_components: usize,
    pub size_law: SizeLaw,
    /// Bounds on the full shard size (before the train/test split).
    pub min_samples: usize,
    pub max_samples: usize,
    pub train_fraction: f64,
    /// Standard deviation of the mixture component means.
    pub separation: f64,
    /// Standard deviation of the per-sample noise around a component mean.
    pub noise_std: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_groups: 3,
            input_dim: 8,
            num_classes: 4,
            hidden_dim: 0,
            classes_per_client: 2,
            shared_components: 0,
            size_law: SizeLaw::default(),
            min_samples: 64,
            max_samples: 2048,
            train_fraction: 0.8,
            separation: 1.0,
            noise_std: 1.0,
        }
    }
}

impl DataConfig {
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::mlp(self.input_dim, self.hidden_dim, self.num_classes)
    }

    pub fn validate(&self, num_clients: usize) -> Result<()> {
        let m = self.num_groups;
        if m == 0 || num_clients < m {
            return Err(Error::invalid(format!(
                "need K >= M >= 1 (K={num_clients}, M={m})"
            )));
        }
        self.model_spec().validate()?;
        if self.classes_per_client == 0 || self.classes_per_client > self.num_classes {
            return Err(Error::invalid(format!(
                "classes_per_client must be in 1..={}",
                self.num_classes
            )));
        }
        if self.shared_components >= self.classes_per_client {
            return Err(Error::invalid(
                "shared_components must leave at least one relabeled component",
            ));
        }
        if m > self.num_classes {
            return Err(Error::invalid(format!(
                "{m} mutually incongruent groups need at least {m} classes"
            )));
        }
        if self.min_samples < 2 || self.min_samples > self.max_samples {
            return Err(Error::invalid("need 2 <= min_samples <= max_samples"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train_fraction must be in (0, 1)"));
        }
        if let SizeLaw::PowerLaw { exponent } = self.size_law {
            if !(exponent > 0.0 && exponent.is_finite()) {
                return Err(Error::invalid("power-law exponent must be positive"));
            }
        }
        if !(self.separation >= 0.0 && self.separation.is_finite())
            || !(self.noise_std > 0.0 && self.noise_std.is_finite())
        {
            return Err(Error::invalid("separation must be >= 0 and noise_std > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientData {
    pub train: DataShard,
    pub test: DataShard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederatedDataset {
    pub spec: ModelSpec,
    /// Keyed by client id, `0..K`.
    pub shards: BTreeMap<usize, ClientData>,
    /// Ground-truth partition; `ground_truth_groups[g]` lists the clients
    /// with distribution id `g`, ascending.
    pub ground_truth_groups: Vec<Vec<usize>>,
}

impl FederatedDataset {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn client(&self, id: usize) -> Result<&ClientData> {
        self.shards
            .get(&id)
            .ok_or_else(|| Error::invalid(format!("unknown client {id}")))
    }

    /// Training sample counts `D_k`, indexed by client id.
    pub fn train_sizes(&self) -> Vec<usize> {
        self.shards.values().map(|c| c.train.len()).collect()
    }

    pub fn total_train_samples(&self) -> usize {
        self.shards.values().map(|c| c.train.len()).sum()
    }

    /// Group label per client id.
    pub fn ground_truth_labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.num_clients()];
        for (g, members) in self.ground_truth_groups.iter().enumerate() {
            for &k in members {
                labels[k] = g;
            }
        }
        labels
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let k = self.num_clients();
        if self.shards.keys().copied().ne(0..k) {
            return Err(Error::invalid("client ids must be exactly 0..K"));
        }
        let mut seen = vec![false; k];
        for (g, members) in self.ground_truth_groups.iter().enumerate() {
            for &c in members {
                if c >= k || seen[c] {
                    return Err(Error::invalid("ground truth is not a partition"));
                }
                seen[c] = true;
                let data = &self.shards[&c];
                if data.train.distribution_id != g || data.test.distribution_id != g {
                    return Err(Error::invalid(format!(
                        "client {c} distribution id disagrees with its group {g}"
                    )));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("ground truth does not cover every client"));
        }
        for data in self.shards.values() {
            for shard in [&data.train, &data.test] {
                shard.validate(Some(self.spec.num_classes))?;
                if shard.input_dim != self.spec.input_dim {
                    return Err(Error::invalid("shard input_dim disagrees with the model"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ds: Self = serde_json::from_reader(file)?;
        ds.validate()?;
        Ok(ds)
    }
}

fn sample_size<R: Rng>(cfg: &DataConfig, rng: &mut R) -> usize {
    let (lo, hi) = (cfg.min_samples as f64, cfg.max_samples as f64);
    let raw = match cfg.size_law {
        SizeLaw::PowerLaw { exponent } => {
            // Inverse-CDF Pareto draw; 1 - u keeps the base in (0, 1].
            let u: f64 = rng.random();
            lo * (1.0 - u).powf(-1.0 / exponent)
        }
        SizeLaw::Uniform => rng.random_range(lo..=hi),
    };
    raw.clamp(lo, hi).round() as usize
}

/// Generates `num_clients` shards split into `cfg.num_groups` groups.
pub fn generate(num_clients: usize, cfg: &DataConfig, seed: u64) -> Result<FederatedDataset> {
    cfg.validate(num_clients)?;
    let (d, c) = (cfg.input_dim, cfg.num_classes);
    let mut rng = stream(seed, StreamTag::Data, 0, 0);

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            (0..d)
                .map(|_| cfg.separation * unit.sample(&mut rng))
                .collect()
        })
        .collect();

    let mut components: Vec<usize> = (0..c).collect();
    components.shuffle(&mut rng);
    let mut active = components[..cfg.classes_per_client].to_vec();
    active.sort_unstable();
    let shared = &components[..cfg.shared_components];

    let mut relabel: Vec<usize> = (0..c).collect();
    relabel.shuffle(&mut rng);

    let mut order: Vec<usize> = (0..num_clients).collect();
    order.shuffle(&mut rng);
    let mut groups = vec![Vec::new(); cfg.num_groups];
    for (i, &client) in order.iter().enumerate() {
        groups[i % cfg.num_groups].push(client);
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    let mut group_of = vec![0; num_clients];
    for (g, members) in groups.iter().enumerate() {
        for &k in members {
            group_of[k] = g;
        }
    }

    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut shards = BTreeMap::new();
    for (k, &g) in group_of.iter().enumerate() {
        let mut rng = stream(seed, StreamTag::Data, k as u64 + 1, 0);
        let n = sample_size(cfg, &mut rng);
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let j = active[rng.random_range(0..active.len())];
            features.extend(means[j].iter().map(|m| m + noise.sample(&mut rng)));
            let shift = if shared.contains(&j) { 0 } else { g };
            labels.push(relabel[(j + shift) % c]);
        }
        let shard = DataShard {
            input_dim: d,
            features,
            labels,
            distribution_id: g,
        };
        let mut split_rng = stream(seed, StreamTag::Split, k as u64, 0);
        let (train, test) = split(&shard, cfg.train_fraction, &mut split_rng)?;
        shards.insert(k, ClientData { train, test });
    }

    let ds = FederatedDataset {
        spec: cfg.model_spec(),
        shards,
        ground_truth_groups: groups,
    };
    ds.validate()?;
    Ok(ds)
}

/// Stratified train/test split.
///
/// The train side receives `round(fraction * n)` samples, clamped so both
/// sides are non-empty, apportioned over labels by largest remainder (ties to
/// the lower label). Within a label the samples are shuffled by `rng` before
/// assignment; each side keeps the original sample order.
pub fn split<R: Rng>(shard: &DataShard, train_fraction: f64, rng: &mut R) -> Result<(DataShard, DataShard)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train_fraction {train_fraction} must be in (0, 1)"
        )));
    }
    let n = shard.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "cannot split a shard of {n} samples into two non-empty parts"
        )));
    }
    let target = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);

    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in shard.labels.iter().enumerate() {
        by_label.entry(y).or_default().push(i);
    }
    let exact: Vec<(usize, f64)> = by_label
        .iter()
        .map(|(&y, idx)| (y, idx.len() as f64 * target as f64 / n as f64))
        .collect();
    let mut quota: BTreeMap<usize, usize> =
        exact.iter().map(|&(y, q)| (y, q.floor() as usize)).collect();
    let mut remaining = target - quota.values().sum::<usize>();
    let mut rema: Vec<(usize, f64)> = exact.iter().map(|&(y, q)| (y, q - q.floor())).collect();
    rema.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (y, _) in rema {
        if remaining == 0 {
            break;
        }
        let q = quota.get_mut(&y).expect("label present");
        if *q < by_label[&y].len() {
            *q += 1;
            remaining -= 1;
        }
    }

    let mut in_train = vec![false; n];
    for (y, idx) in by_label.iter_mut() {
        idx.shuffle(rng);
        for &i in &idx[..quota[y]] {
            in_train[i] = true;
        }
    }
    let train_idx: Vec<usize> = (0..n).filter(|&i| in_train[i]).collect();
    let test_idx: Vec<usize> = (0..n).filter(|&i| !in_train[i]).collect();
    Ok((shard.select(&train_idx), shard.select(&test_idx)))
}
