//! `cflsim bound`: empirical check of the convergence bound on quadratics.

use std::path::Path;

use cfl_core::bound::{empirical_check, zeta1_scan, zeta2, EmpiricalConfig, EmpiricalReport, Zeta1Finding, Zeta2Reading};
use clap::ValueEnum;
use serde::Serialize;

use crate::error::CliError;

pub const BOUND_CSV: &str = "bound.csv";
pub const BOUND_REPORT: &str = "bound_report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Noise-free gradients and identical client optima.
    Deterministic,
    /// Spread client optima with gradient noise (the default harness).
    Heterogeneous,
    /// Identical client optima with gradient noise; zero optimal gap.
    Identical,
}

impl Preset {
    pub fn config(self) -> EmpiricalConfig {
        let base = EmpiricalConfig::default();
        match self {
            Preset::Deterministic => EmpiricalConfig { noise_std: 0.0, center_spread: 0.0, ..base },
            Preset::Heterogeneous => base,
            Preset::Identical => EmpiricalConfig { center_spread: 0.0, ..base },
        }
    }
}

/// `zeta2` at the measured constants under both readings.
#[derive(Debug, Clone, Serialize)]
pub struct Zeta2Readings {
    pub theorem: f64,
    pub derivation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub passed: bool,
    pub violation_count: usize,
    pub zeta2_readings: Zeta2Readings,
    /// Grid points with `0 < eta <= 1/(alpha T)` where `zeta1` leaves (0, 1).
    pub zeta1_findings: Vec<Zeta1Finding>,
    #[serde(flatten)]
    pub report: EmpiricalReport,
}

/// Scans `eta` in {1/4, 1/2, 1} x `1/(alpha T)` over a fixed grid plus the
/// configured constants.
pub fn zeta1_grid(cfg: &EmpiricalConfig) -> Vec<Zeta1Finding> {
    let mut alphas = vec![0.01, 0.05, 0.1, 0.5, 1.0, 2.0, 10.0];
    let mut steps = vec![1, 2, 5, 10, 20, 50];
    if !alphas.contains(&cfg.alpha) {
        alphas.push(cfg.alpha);
    }
    if !steps.contains(&cfg.local_steps) {
        steps.push(cfg.local_steps);
    }
    let mut out = Vec::new();
    for &a in &alphas {
        for &t in &steps {
            let etas = [0.25, 0.5, 1.0].map(|f| f / (a * t as f64));
            out.extend(zeta1_scan(&[a], &etas, &[t]));
        }
    }
    out
}

pub fn execute(cfg: &EmpiricalConfig, out: &Path) -> Result<BoundReport, CliError> {
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let report = empirical_check(cfg)?;
    report.write_csv(&out.join(BOUND_CSV))?;
    let p = &report.params;
    let z2 = |reading| zeta2(reading, p.alpha, report.eta, p.local_steps, p.rho_sq, p.heterogeneity);
    let full = BoundReport {
        passed: report.passed(),
        violation_count: report.violations.len(),
        zeta2_readings: Zeta2Readings { theorem: z2(Zeta2Reading::Theorem), derivation: z2(Zeta2Reading::Derivation) },
        zeta1_findings: zeta1_grid(cfg),
        report,
    };
    let path = out.join(BOUND_REPORT);
    let text = serde_json::to_string_pretty(&full)? + "\n";
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(full)
}
