//! Convergence-bound recursion and its empirical check on quadratics.
//!
//! The bound tracks `b(r) >= E ||W(r) - W*||^2` through
//! `b(r+1) = zeta1(r) b(r) + zeta2(r)`. The empirical harness runs
//! full-participation FedAvg on diagonal quadratics whose optimum and
//! curvature constants are known exactly, then compares the seed-averaged
//! distance to the bound.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{stream, StreamTag};

/// Two readings of `zeta2`. They differ in the step-size factor of the
/// first term and in whether `zeta1` scales the heterogeneity term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Zeta2Reading {
    /// `(1 + a(1 - eta z1)) eta^2 p T(T-1)(2T-1)/6 + eta^2 (T^2+T-1) p + 2 eta z1 (T-1) F`
    #[default]
    Theorem,
    /// `(1 + a(1 - eta)) eta^2 p T(T-1)(2T-1)/6 + eta^2 (T^2+T-1) p + 2 eta (T-1) F`
    Derivation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EtaSchedule {
    /// `eta = 1 / (alpha T)` every round.
    #[default]
    Theorem,
    Constant { eta: f64 },
    /// `eta(t) = eta0 / (1 + decay t)`.
    Decaying { eta0: f64, decay: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    pub alpha: f64,
    pub beta: f64,
    /// Bound on the expected squared local gradient norm.
    pub rho_sq: f64,
    /// Local steps per round.
    pub local_steps: usize,
    /// Heterogeneity constant.
    #[serde(default)]
    pub heterogeneity: f64,
    #[serde(default)]
    pub eta: EtaSchedule,
    #[serde(default)]
    pub reading: Zeta2Reading,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be positive"));
        }
        if !(self.beta >= self.alpha && self.beta.is_finite()) {
            return Err(Error::invalid("beta must satisfy alpha <= beta"));
        }
        if !(self.rho_sq > 0.0 && self.rho_sq.is_finite()) {
            return Err(Error::invalid("rho_sq must be positive"));
        }
        if self.local_steps == 0 {
            return Err(Error::invalid("local_steps must be at least 1"));
        }
        if !(self.heterogeneity >= 0.0 && self.heterogeneity.is_finite()) {
            return Err(Error::invalid("heterogeneity must be non-negative"));
        }
        match self.eta {
            EtaSchedule::Theorem => {}
            EtaSchedule::Constant { eta } => {
                if !(eta >= 0.0 && eta.is_finite()) {
                    return Err(Error::invalid("eta must be non-negative"));
                }
            }
            EtaSchedule::Decaying { eta0, decay } => {
                if !(eta0 >= 0.0 && eta0.is_finite() && decay >= 0.0 && decay.is_finite()) {
                    return Err(Error::invalid("eta0 and decay must be non-negative"));
                }
            }
        }
        Ok(())
    }

    pub fn eta_at(&self, t: usize) -> f64 {
        match self.eta {
            EtaSchedule::Theorem => 1.0 / (self.alpha * self.local_steps as f64),
            EtaSchedule::Constant { eta } => eta,
            EtaSchedule::Decaying { eta0, decay } => eta0 / (1.0 + decay * t as f64),
        }
    }

    pub fn zeta1_at(&self, t: usize) -> f64 {
        zeta1(self.alpha, self.eta_at(t), self.local_steps)
    }

    pub fn zeta2_at(&self, t: usize) -> f64 {
        zeta2(
            self.reading,
            self.alpha,
            self.eta_at(t),
            self.local_steps,
            self.rho_sq,
            self.heterogeneity,
        )
    }
}

pub fn zeta1(alpha: f64, eta: f64, local_steps: usize) -> f64 {
    let t = local_steps as f64;
    1.0 - alpha * eta * (t - eta * (t - 1.0))
}

pub fn zeta2(
    reading: Zeta2Reading,
    alpha: f64,
    eta: f64,
    local_steps: usize,
    rho_sq: f64,
    heterogeneity: f64,
) -> f64 {
    let t = local_steps as f64;
    let z1 = zeta1(alpha, eta, local_steps);
    let cubic = t * (t - 1.0) * (2.0 * t - 1.0) / 6.0;
    let quad = eta * eta * (t * t + t - 1.0) * rho_sq;
    match reading {
        Zeta2Reading::Theorem => {
            (1.0 + alpha * (1.0 - eta * z1)) * eta * eta * rho_sq * cubic
                + quad
                + 2.0 * eta * z1 * (t - 1.0) * heterogeneity
        }
        Zeta2Reading::Derivation => {
            (1.0 + alpha * (1.0 - eta)) * eta * eta * rho_sq * cubic
                + quad
                + 2.0 * eta * (t - 1.0) * heterogeneity
        }
    }
}

/// `b(0..=rounds)` by the recursion.
pub fn bound_trajectory(w0_dist: f64, params: &BoundParams, rounds: usize) -> Result<Vec<f64>> {
    params.validate()?;
    if !(w0_dist >= 0.0 && w0_dist.is_finite()) {
        return Err(Error::invalid("initial distance must be non-negative"));
    }
    let mut out = Vec::with_capacity(rounds + 1);
    let mut b = w0_dist;
    out.push(b);
    for t in 0..rounds {
        b = params.zeta1_at(t) * b + params.zeta2_at(t);
        out.push(b);
    }
    Ok(out)
}

/// Same values as [`bound_trajectory`], evaluated as an explicit product and
/// sum of products for every round. Quadratic in `rounds`.
pub fn bound_product_sum(w0_dist: f64, params: &BoundParams, rounds: usize) -> Result<Vec<f64>> {
    params.validate()?;
    let z1: Vec<f64> = (0..rounds).map(|t| params.zeta1_at(t)).collect();
    let z2: Vec<f64> = (0..rounds).map(|t| params.zeta2_at(t)).collect();
    Ok((0..=rounds)
        .map(|r| {
            let head: f64 = z1[..r].iter().product::<f64>() * w0_dist;
            let tail: f64 = (0..r)
                .map(|tp| z2[tp] * z1[tp + 1..r].iter().product::<f64>())
                .sum();
            head + tail
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Zeta1Finding {
    pub alpha: f64,
    pub eta: f64,
    pub local_steps: usize,
    pub zeta1: f64,
}

/// Grid points where `zeta1` falls outside the open unit interval.
pub fn zeta1_scan(alphas: &[f64], etas: &[f64], steps: &[usize]) -> Vec<Zeta1Finding> {
    let mut out = Vec::new();
    for &alpha in alphas {
        for &eta in etas {
            for &local_steps in steps {
                let z = zeta1(alpha, eta, local_steps);
                if !(z > 0.0 && z < 1.0) {
                    out.push(Zeta1Finding { alpha, eta, local_steps, zeta1: z });
                }
            }
        }
    }
    out
}

/// Per-client objectives `F_k(W) = 1/2 sum_i a_ki (W_i - c_ki)^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticProblem {
    pub curvatures: Vec<Vec<f64>>,
    pub centers: Vec<Vec<f64>>,
}

impl QuadraticProblem {
    pub fn new(curvatures: Vec<Vec<f64>>, centers: Vec<Vec<f64>>) -> Result<Self> {
        if curvatures.is_empty() || curvatures.len() != centers.len() {
            return Err(Error::invalid("need one curvature and center row per client"));
        }
        let d = curvatures[0].len();
        if d == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        for (a, c) in curvatures.iter().zip(&centers) {
            if a.len() != d || c.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: if a.len() != d { a.len() } else { c.len() },
                });
            }
            if a.iter().any(|&x| !(x > 0.0 && x.is_finite())) || c.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("curvatures must be positive and centers finite"));
            }
        }
        Ok(Self { curvatures, centers })
    }

    pub fn num_clients(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    /// Minimizer of the equally weighted average objective.
    pub fn optimum(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                let num: f64 = self.curvatures.iter().zip(&self.centers).map(|(a, c)| a[i] * c[i]).sum();
                let den: f64 = self.curvatures.iter().map(|a| a[i]).sum();
                num / den
            })
            .collect()
    }

    pub fn client_loss(&self, k: usize, w: &[f64]) -> f64 {
        let (a, c) = (&self.curvatures[k], &self.centers[k]);
        0.5 * w.iter().zip(a).zip(c).map(|((w, a), c)| a * (w - c) * (w - c)).sum::<f64>()
    }

    pub fn client_gradient(&self, k: usize, w: &[f64], out: &mut [f64]) {
        let (a, c) = (&self.curvatures[k], &self.centers[k]);
        for i in 0..w.len() {
            out[i] = a[i] * (w[i] - c[i]);
        }
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        (0..self.num_clients()).map(|k| self.client_loss(k, w)).sum::<f64>() / self.num_clients() as f64
    }

    /// `max_k F_k(W*) - F_k*`; each `F_k*` is zero.
    pub fn heterogeneity(&self) -> f64 {
        let opt = self.optimum();
        (0..self.num_clients())
            .map(|k| self.client_loss(k, &opt))
            .fold(0.0, f64::max)
    }

    /// `F(W*) - (1/K) sum_k F_k*` over all clients.
    pub fn optimal_gap(&self) -> f64 {
        self.loss(&self.optimum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmpiricalConfig {
    pub dim: usize,
    pub clients: usize,
    pub alpha: f64,
    pub beta: f64,
    pub local_steps: usize,
    /// Standard deviation of the per-coordinate gradient noise.
    pub noise_std: f64,
    /// Spread of the client optima around a common point; 0 gives identical clients.
    pub center_spread: f64,
    /// Scale of the initial offset from the optimum.
    pub init_scale: f64,
    pub rounds: usize,
    pub seeds: usize,
    /// Seed of the problem instance; noise seeds are `base_seed + 1 ..= base_seed + seeds`.
    pub base_seed: u64,
    pub slack: f64,
    pub reading: Zeta2Reading,
}

impl Default for EmpiricalConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            clients: 10,
            alpha: 1.0,
            beta: 2.0,
            local_steps: 5,
            noise_std: 0.1,
            center_spread: 1.0,
            init_scale: 3.0,
            rounds: 100,
            seeds: 50,
            base_seed: 0,
            slack: 1.05,
            reading: Zeta2Reading::Theorem,
        }
    }
}

impl EmpiricalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.clients == 0 || self.local_steps == 0 || self.seeds == 0 {
            return Err(Error::invalid("dim, clients, local_steps and seeds must be positive"));
        }
        if !(self.alpha > 0.0 && self.beta >= self.alpha && self.beta.is_finite()) {
            return Err(Error::invalid("need 0 < alpha <= beta"));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("center_spread", self.center_spread),
            ("init_scale", self.init_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be non-negative")));
            }
        }
        if !(self.slack >= 1.0 && self.slack.is_finite()) {
            return Err(Error::invalid("slack must be at least 1"));
        }
        Ok(())
    }

    /// Curvatures are uniform in `[alpha, beta]` with both endpoints attained
    /// on every client, so the constants are exact.
    pub fn problem(&self) -> Result<QuadraticProblem> {
        self.validate()?;
        let mut rng = stream(self.base_seed, StreamTag::Bound, u64::MAX, 0);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut curvatures = Vec::with_capacity(self.clients);
        let mut centers = Vec::with_capacity(self.clients);
        for _ in 0..self.clients {
            let mut a: Vec<f64> = (0..self.dim).map(|_| rng.random_range(self.alpha..=self.beta)).collect();
            a[0] = self.alpha;
            if self.dim > 1 {
                a[self.dim - 1] = self.beta;
            }
            curvatures.push(a);
            centers.push((0..self.dim).map(|_| self.center_spread * normal.sample(&mut rng)).collect());
        }
        QuadraticProblem::new(curvatures, centers)
    }

    fn initial_point(&self, optimum: &[f64]) -> Vec<f64> {
        let mut rng = stream(self.base_seed, StreamTag::Bound, u64::MAX, 1);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        optimum.iter().map(|o| o + self.init_scale * normal.sample(&mut rng)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub round: usize,
    pub empirical: f64,
    pub bound: f64,
    pub loss_gap: f64,
    pub loss_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundQuantity {
    Distance,
    LossGap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundViolation {
    pub round: usize,
    pub quantity: BoundQuantity,
    pub empirical: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalReport {
    pub config: EmpiricalConfig,
    pub params: BoundParams,
    pub eta: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    pub optimal_gap: f64,
    pub rows: Vec<BoundRow>,
    pub violations: Vec<BoundViolation>,
    /// Largest `empirical / bound` over all rounds.
    pub max_ratio: f64,
}

impl EmpiricalReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// Columns: round, empirical, bound.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "round,empirical,bound")?;
        for row in &self.rows {
            writeln!(f, "{},{:e},{:e}", row.round, row.empirical, row.bound)?;
        }
        f.flush()?;
        Ok(())
    }
}

struct SeedTrace {
    dist: Vec<f64>,
    loss: Vec<f64>,
    max_grad_sq: f64,
}

fn run_seed(problem: &QuadraticProblem, w0: &[f64], opt: &[f64], eta: f64, cfg: &EmpiricalConfig, seed: u64) -> SeedTrace {
    let d = problem.dim();
    let k_count = problem.num_clients();
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let dist_sq = |w: &[f64]| w.iter().zip(opt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut w = w0.to_vec();
    let mut dist = vec![dist_sq(&w)];
    let mut loss = vec![problem.loss(&w)];
    let mut max_grad_sq = 0.0f64;
    let mut grad = vec![0.0; d];
    for r in 0..cfg.rounds {
        let mut next = vec![0.0; d];
        for k in 0..k_count {
            let mut rng = stream(seed, StreamTag::Bound, k as u64, r as u64);
            let mut wk = w.clone();
            for _ in 0..cfg.local_steps {
                problem.client_gradient(k, &wk, &mut grad);
                max_grad_sq = max_grad_sq.max(grad.iter().map(|g| g * g).sum());
                for i in 0..d {
                    let xi = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    wk[i] -= eta * (grad[i] + xi);
                }
            }
            for i in 0..d {
                next[i] += wk[i];
            }
        }
        for v in &mut next {
            *v /= k_count as f64;
        }
        w = next;
        dist.push(dist_sq(&w));
        loss.push(problem.loss(&w));
    }
    SeedTrace { dist, loss, max_grad_sq }
}

/// Runs the harness and compares the seed mean of `||W(r) - W*||^2` with the
/// bound, and the mean loss gap with `beta/2` times the bound.
///
/// `rho_sq` is the largest squared true gradient norm seen in any local step
/// of any seed plus the noise variance `dim * noise_std^2`; the
/// heterogeneity constant is `max_k F_k(W*) - F_k*`.
pub fn empirical_check(cfg: &EmpiricalConfig) -> Result<EmpiricalReport> {
    let problem = cfg.problem()?;
    let opt = problem.optimum();
    let w0 = cfg.initial_point(&opt);
    let eta = 1.0 / (cfg.alpha * cfg.local_steps as f64);
    let traces: Vec<SeedTrace> = (1..=cfg.seeds as u64)
        .into_par_iter()
        .map(|s| run_seed(&problem, &w0, &opt, eta, cfg, cfg.base_seed.wrapping_add(s)))
        .collect();

    let n = traces.len() as f64;
    let max_grad_sq = traces.iter().map(|t| t.max_grad_sq).fold(0.0, f64::max);
    let rho_sq = (max_grad_sq + cfg.dim as f64 * cfg.noise_std * cfg.noise_std).max(f64::MIN_POSITIVE);
    let params = BoundParams {
        alpha: cfg.alpha,
        beta: cfg.beta,
        rho_sq,
        local_steps: cfg.local_steps,
        heterogeneity: problem.heterogeneity(),
        eta: EtaSchedule::Theorem,
        reading: cfg.reading,
    };
    let w0_dist = traces[0].dist[0];
    let bound = bound_trajectory(w0_dist, &params, cfg.rounds)?;
    let f_star = problem.loss(&opt);

    let mut rows = Vec::with_capacity(cfg.rounds + 1);
    let mut violations = Vec::new();
    let mut max_ratio = 0.0f64;
    for (r, &b) in bound.iter().enumerate() {
        let empirical = traces.iter().map(|t| t.dist[r]).sum::<f64>() / n;
        let loss_gap = traces.iter().map(|t| t.loss[r] - f_star).sum::<f64>() / n;
        let loss_bound = 0.5 * cfg.beta * b;
        if b > 0.0 {
            max_ratio = max_ratio.max(empirical / b);
        }
        if empirical > cfg.slack * b {
            violations.push(BoundViolation { round: r, quantity: BoundQuantity::Distance, empirical, limit: cfg.slack * b });
        }
        if loss_gap > cfg.slack * loss_bound {
            violations.push(BoundViolation {
                round: r,
                quantity: BoundQuantity::LossGap,
                empirical: loss_gap,
                limit: cfg.slack * loss_bound,
            });
        }
        rows.push(BoundRow { round: r, empirical, bound: b, loss_gap, loss_bound });
    }

    Ok(EmpiricalReport {
        config: cfg.clone(),
        eta,
        zeta1: params.zeta1_at(0),
        zeta2: params.zeta2_at(0),
        params,
        optimal_gap: problem.optimal_gap(),
        rows,
        violations,
        max_ratio,
    })
}
