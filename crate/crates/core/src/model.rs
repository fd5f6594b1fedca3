//! Softmax classifier (multinomial logistic regression or a one-hidden-layer
//! ReLU network) and its mini-batch SGD local solver.
//!
//! Parameter layout, all row-major:
//!
//! * logistic: `W (C x d)`, `b (C)`
//! * MLP: `W1 (h x d)`, `b1 (h)`, `W2 (C x h)`, `b2 (C)`

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// 0 selects plain logistic regression.
    #[serde(default)]
    pub hidden_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: 0,
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
        if h == 0 {
            c * d + c
        } else {
            h * d + h + c * h + c
        }
    }

    /// Initial parameters: zeros for logistic regression, Glorot-uniform
    /// first layer for the MLP (zeros there would never break symmetry).
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamVector {
        let mut p = ParamVector::zeros(self.param_count());
        if self.hidden_dim > 0 {
            let (d, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
            let lim1 = (6.0 / (d + h) as f64).sqrt();
            let lim2 = (6.0 / (h + c) as f64).sqrt();
            let v = p.as_mut_slice();
            for w in &mut v[..h * d] {
                *w = rng.random_range(-lim1..lim1);
            }
            let w2 = h * d + h;
            for w in &mut v[w2..w2 + c * h] {
                *w = rng.random_range(-lim2..lim2);
            }
        }
        p
    }

    fn check(&self, params: &ParamVector) -> Result<()> {
        if params.dim() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                found: params.dim(),
            });
        }
        Ok(())
    }
}

/// One client's samples. Features are stored row-major, `len() x input_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataShard {
    pub input_dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub distribution_id: usize,
}

impl DataShard {
    pub fn new(
        input_dim: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        distribution_id: usize,
    ) -> Result<Self> {
        let shard = Self {
            input_dim,
            features,
            labels,
            distribution_id,
        };
        shard.validate(None)?;
        Ok(shard)
    }

    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("shard input_dim must be positive"));
        }
        if self.labels.is_empty() {
            return Err(Error::invalid("a shard needs at least one sample"));
        }
        if self.features.len() != self.labels.len() * self.input_dim {
            return Err(Error::invalid(format!(
                "feature buffer holds {} values, expected {} x {}",
                self.features.len(),
                self.labels.len(),
                self.input_dim
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        if let Some(c) = num_classes {
            if let Some(&bad) = self.labels.iter().find(|&&y| y >= c) {
                return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// A new shard holding the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> DataShard {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        DataShard {
            input_dim: self.input_dim,
            features,
            labels,
            distribution_id: self.distribution_id,
        }
    }
}

/// Local SGD steps per round: `E * ceil(D_k / b)`.
pub fn local_update_count(epochs: usize, samples: usize, batch: usize) -> Result<usize> {
    if epochs == 0 || samples == 0 || batch == 0 {
        return Err(Error::invalid(format!(
            "local_update_count needs positive inputs (E={epochs}, D_k={samples}, b={batch})"
        )));
    }
    Ok(epochs * samples.div_ceil(batch))
}

fn check_pair(params: &ParamVector, shard: &DataShard, spec: &ModelSpec) -> Result<()> {
    spec.check(params)?;
    if shard.input_dim != spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim,
            found: shard.input_dim,
        });
    }
    if shard.is_empty() {
        return Err(Error::invalid("empty shard"));
    }
    if let Some(&bad) = shard.labels.iter().find(|&&y| y >= spec.num_classes) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    Ok(())
}

/// Scratch buffers for one forward/backward pass.
struct Workspace {
    hidden: Vec<f64>,
    logits: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Workspace {
    fn new(spec: &ModelSpec) -> Self {
        Self {
            hidden: vec![0.0; spec.hidden_dim],
            logits: vec![0.0; spec.num_classes],
            dhidden: vec![0.0; spec.hidden_dim],
        }
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * n_in..(j + 1) * n_in];
        *o = b[j] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// Replaces logits by softmax probabilities; returns log-sum-exp.
fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

fn forward(spec: &ModelSpec, p: &[f64], x: &[f64], ws: &mut Workspace) {
    let (d, h, c) = (spec.input_dim, spec.hidden_dim, spec.num_classes);
    if h == 0 {
        affine(&p[..c * d], &p[c * d..c * d + c], x, &mut ws.logits);
    } else {
        let (w1, rest) = p.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(c * h);
        affine(w1, b1, x, &mut ws.hidden);
        for a in ws.hidden.iter_mut() {
            *a = a.max(0.0);
        }
        affine(w2, b2, &ws.hidden, &mut ws.logits);
    }
}

/// Mean cross-entropy over `indices`; if `grad` is given, the mean gradient
/// is written into it (overwriting).
fn batch_loss(
    spec: &ModelSpec,
    p: &[f64],
    shard: &DataShard,
    indices: impl ExactSizeIterator<Item = usize>,
    mut grad: Option<&mut [f64]>,
    ws: &mut Workspace,
) -> f64 {
    let (d, h, c) = (spec.input_dim, spec.hidden_dim, spec.num_classes);
    let n = indices.len();
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    let mut total = 0.0;
    for i in indices {
        let x = shard.sample(i);
        let y = shard.labels[i];
        forward(spec, p, x, ws);
        let z_y = ws.logits[y];
        let lse = softmax_in_place(&mut ws.logits);
        total += lse - z_y;
        let Some(g) = grad.as_deref_mut() else {
            continue;
        };
        // ws.logits now holds p - e_y after this adjustment.
        ws.logits[y] -= 1.0;
        if h == 0 {
            let (gw, gb) = g.split_at_mut(c * d);
            for k in 0..c {
                let dz = ws.logits[k];
                gb[k] += dz;
                for (gw, xv) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                    *gw += dz * xv;
                }
            }
        } else {
            let w2 = &p[h * d + h..h * d + h + c * h];
            let (gw1, rest) = g.split_at_mut(h * d);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(c * h);
            ws.dhidden.fill(0.0);
            for k in 0..c {
                let dz = ws.logits[k];
                gb2[k] += dz;
                let row = &w2[k * h..(k + 1) * h];
                for j in 0..h {
                    gw2[k * h + j] += dz * ws.hidden[j];
                    ws.dhidden[j] += dz * row[j];
                }
            }
            for j in 0..h {
                if ws.hidden[j] <= 0.0 {
                    continue;
                }
                let da = ws.dhidden[j];
                gb1[j] += da;
                for (gw, xv) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *gw += da * xv;
                }
            }
        }
    }
    let inv = 1.0 / n as f64;
    if let Some(g) = grad {
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    total * inv
}

/// Mean cross-entropy `F_k(W) = (1/D_k) sum_i f_i(W)`.
pub fn loss(params: &ParamVector, shard: &DataShard, spec: &ModelSpec) -> Result<f64> {
    check_pair(params, shard, spec)?;
    let mut ws = Workspace::new(spec);
    Ok(batch_loss(spec, params.as_slice(), shard, 0..shard.len(), None, &mut ws))
}

/// Exact gradient of [`loss`] with respect to the parameters.
pub fn gradient(params: &ParamVector, shard: &DataShard, spec: &ModelSpec) -> Result<ParamVector> {
    Ok(loss_and_gradient(params, shard, spec)?.1)
}

pub fn loss_and_gradient(
    params: &ParamVector,
    shard: &DataShard,
    spec: &ModelSpec,
) -> Result<(f64, ParamVector)> {
    check_pair(params, shard, spec)?;
    let mut ws = Workspace::new(spec);
    let mut g = vec![0.0; spec.param_count()];
    let l = batch_loss(
        spec,
        params.as_slice(),
        shard,
        0..shard.len(),
        Some(&mut g),
        &mut ws,
    );
    Ok((l, ParamVector::from_raw(g)))
}

/// Fraction of argmax-correct predictions; ties go to the lowest class id.
pub fn accuracy(params: &ParamVector, shard: &DataShard, spec: &ModelSpec) -> Result<f64> {
    check_pair(params, shard, spec)?;
    let mut ws = Workspace::new(spec);
    let p = params.as_slice();
    let correct = (0..shard.len())
        .filter(|&i| {
            forward(spec, p, shard.sample(i), &mut ws);
            let mut best = 0;
            for k in 1..ws.logits.len() {
                if ws.logits[k] > ws.logits[best] {
                    best = k;
                }
            }
            best == shard.labels[i]
        })
        .count();
    Ok(correct as f64 / shard.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainOutcome {
    pub params: ParamVector,
    /// `params - start`, computed element-wise after training.
    pub delta: ParamVector,
    pub steps: usize,
}

/// Mini-batch SGD for `epochs` passes. Each epoch reshuffles the sample order
/// with `rng`; the last batch of an epoch may be short.
pub fn local_train<R: Rng>(
    start: &ParamVector,
    shard: &DataShard,
    spec: &ModelSpec,
    epochs: usize,
    batch: usize,
    learning_rate: f64,
    rng: &mut R,
) -> Result<LocalTrainOutcome> {
    check_pair(start, shard, spec)?;
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(Error::invalid(format!("learning rate {learning_rate} must be finite and non-negative")));
    }
    let expected_steps = local_update_count(epochs, shard.len(), batch)?;
    let mut params = start.clone();
    let mut grad = vec![0.0; spec.param_count()];
    let mut ws = Workspace::new(spec);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut steps = 0usize;
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            batch_loss(
                spec,
                params.as_slice(),
                shard,
                chunk.iter().copied(),
                Some(&mut grad),
                &mut ws,
            );
            for (w, g) in params.as_mut_slice().iter_mut().zip(&grad) {
                *w -= learning_rate * g;
            }
            steps += 1;
        }
    }
    debug_assert_eq!(steps, expected_steps);
    if !params.is_finite() {
        return Err(Error::invalid("local training diverged to non-finite parameters"));
    }
    let delta = params.sub(start)?;
    Ok(LocalTrainOutcome {
        params,
        delta,
        steps,
    })
}
