//! Channel, rate and latency model of the edge network.
//!
//! Uplink only: OFDMA sub-channels of `B / N` Hz each, a fourth-power path
//! loss with exponential (Rayleigh power) fast fading redrawn every round,
//! Shannon rate in nats/s, and per-client compute time `E * phi * D_k / f_k`.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{stream, StreamTag};

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm) * 1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.min > 0.0 && self.min <= self.max && self.max.is_finite()) {
            return Err(Error::invalid(format!(
                "{what} range must satisfy 0 < min <= max < inf, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    fn contains(&self, v: f64) -> bool {
        self.min <= v && v <= self.max
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WirelessConfig {
    pub bandwidth_hz: f64,
    pub subchannels: usize,
    /// Background noise power, watts.
    pub noise_w: f64,
    pub g0_db: f64,
    pub d0_m: f64,
    pub distance_m: Range,
    /// Transmit power, drawn uniformly in dBm.
    pub power_dbm: Range,
    pub cpu_hz: Range,
    pub cycles_per_sample: f64,
    /// Upload size in bits; `None` means 32 bits per model parameter.
    pub model_bits: Option<f64>,
    /// Std-dev of multiplicative Gaussian error applied to the latency
    /// estimates the server sorts by. Zero means exact estimates.
    pub latency_noise_std: f64,
}

impl Default for WirelessConfig {
    fn default() -> Self {
        Self {
            bandwidth_hz: 10e6,
            subchannels: 10,
            noise_w: 1e-6,
            g0_db: -35.0,
            d0_m: 2.0,
            distance_m: Range::new(20.0, 100.0),
            power_dbm: Range {
                min: -10.0,
                max: 20.0,
            },
            cpu_hz: Range::new(1e9, 9e9),
            cycles_per_sample: 20.0,
            model_bits: None,
            latency_noise_std: 0.0,
        }
    }
}

impl WirelessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_hz > 0.0 && self.bandwidth_hz.is_finite()) {
            return Err(Error::invalid("bandwidth_hz must be positive"));
        }
        if self.subchannels == 0 {
            return Err(Error::invalid("subchannels must be at least 1"));
        }
        if !(self.noise_w > 0.0) || !(self.d0_m > 0.0) || !self.g0_db.is_finite() {
            return Err(Error::invalid("noise_w and d0_m must be positive, g0_db finite"));
        }
        self.distance_m.validate("distance_m")?;
        self.cpu_hz.validate("cpu_hz")?;
        if !(self.power_dbm.min <= self.power_dbm.max && self.power_dbm.max.is_finite() && self.power_dbm.min.is_finite()) {
            return Err(Error::invalid("power_dbm range must be finite with min <= max"));
        }
        if !(self.cycles_per_sample > 0.0) {
            return Err(Error::invalid("cycles_per_sample must be positive"));
        }
        if let Some(bits) = self.model_bits {
            if !(bits >= 0.0 && bits.is_finite()) {
                return Err(Error::invalid("model_bits must be finite and non-negative"));
            }
        }
        if !(self.latency_noise_std >= 0.0 && self.latency_noise_std.is_finite()) {
            return Err(Error::invalid("latency_noise_std must be >= 0"));
        }
        Ok(())
    }

    pub fn plan(&self) -> BandwidthPlan {
        BandwidthPlan {
            total_hz: self.bandwidth_hz,
            subchannels: self.subchannels,
        }
    }

    pub fn model_bits_for(&self, param_count: usize) -> f64 {
        self.model_bits.unwrap_or(32.0 * param_count as f64)
    }
}

/// OFDMA split of the uplink band into equal sub-channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthPlan {
    pub total_hz: f64,
    pub subchannels: usize,
}

impl BandwidthPlan {
    /// Sub-channel count read literally as `floor(B / xi)`, at least 1.
    pub fn from_model_size(total_hz: f64, model_bits: f64) -> Result<Self> {
        if !(total_hz > 0.0 && model_bits > 0.0) {
            return Err(Error::invalid("bandwidth and model size must be positive"));
        }
        Ok(Self {
            total_hz,
            subchannels: ((total_hz / model_bits).floor() as usize).max(1),
        })
    }

    /// Bandwidth `lambda_k * B` given to one uploading participant.
    pub fn per_participant_hz(&self) -> f64 {
        self.total_hz / self.subchannels as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub id: usize,
    pub cpu_hz: f64,
    pub cycles_per_sample: f64,
    pub tx_power_w: f64,
    pub distance_m: f64,
    pub model_bits: f64,
    /// Training samples `D_k`.
    pub samples: usize,
}

impl ClientProfile {
    /// Draws device parameters for client `id` from the configured ranges.
    pub fn generate(
        id: usize,
        samples: usize,
        model_bits: f64,
        cfg: &WirelessConfig,
        seed: u64,
    ) -> Self {
        let mut rng = stream(seed, StreamTag::Profile, id as u64, 0);
        let distance_m = cfg.distance_m.draw(&mut rng);
        let cpu_hz = cfg.cpu_hz.draw(&mut rng);
        let power_dbm = if cfg.power_dbm.min == cfg.power_dbm.max {
            cfg.power_dbm.min
        } else {
            rng.random_range(cfg.power_dbm.min..=cfg.power_dbm.max)
        };
        Self {
            id,
            cpu_hz,
            cycles_per_sample: cfg.cycles_per_sample,
            tx_power_w: dbm_to_watts(power_dbm),
            distance_m,
            model_bits,
            samples,
        }
    }

    pub fn validate(&self, cfg: &WirelessConfig) -> Result<()> {
        let pw = cfg.power_dbm;
        let ok = cfg.cpu_hz.contains(self.cpu_hz)
            && cfg.distance_m.contains(self.distance_m)
            && self.tx_power_w >= dbm_to_watts(pw.min) * (1.0 - 1e-12)
            && self.tx_power_w <= dbm_to_watts(pw.max) * (1.0 + 1e-12)
            && self.samples > 0;
        if !ok {
            return Err(Error::invalid(format!("client {} profile out of range", self.id)));
        }
        Ok(())
    }
}

/// Deterministic path-loss gain `g0 * (d0 / d)^4`.
pub fn path_loss_gain(g0_db: f64, d0_m: f64, distance_m: f64) -> f64 {
    db_to_linear(g0_db) * (d0_m / distance_m).powi(4)
}

/// Fast-fading power draw for `(seed, client, round)`.
pub fn fading(client: usize, round: usize, seed: u64) -> f64 {
    let mut rng = stream(seed, StreamTag::Fading, client as u64, round as u64);
    Exp1.sample(&mut rng)
}

/// `|h_k^r|^2`: path loss times an exponential(1) fading draw.
pub fn channel_gain(profile: &ClientProfile, round: usize, seed: u64, cfg: &WirelessConfig) -> f64 {
    path_loss_gain(cfg.g0_db, cfg.d0_m, profile.distance_m) * fading(profile.id, round, seed)
}

/// Shannon rate `lambda B * ln(1 + P * gain / N0)` in nats/s.
pub fn data_rate(bandwidth_hz: f64, power_w: f64, gain: f64, noise_w: f64) -> Result<f64> {
    if !(bandwidth_hz > 0.0) {
        return Err(Error::invalid(format!("bandwidth {bandwidth_hz} must be positive")));
    }
    if !(noise_w > 0.0) || !(power_w >= 0.0) || !(gain >= 0.0) {
        return Err(Error::invalid("need noise > 0 and non-negative power and gain"));
    }
    Ok(bandwidth_hz * (power_w * gain / noise_w).ln_1p())
}

pub fn upload_latency(model_bits: f64, rate: f64) -> Result<f64> {
    if rate.is_nan() || rate < 0.0 {
        return Err(Error::invalid(format!("rate {rate} must be non-negative")));
    }
    if rate == 0.0 {
        return Err(Error::ZeroRate);
    }
    Ok(model_bits / rate)
}

pub fn compute_latency(epochs: usize, cycles_per_sample: f64, samples: usize, cpu_hz: f64) -> Result<f64> {
    if epochs == 0 || samples == 0 || !(cycles_per_sample > 0.0) || !(cpu_hz > 0.0) {
        return Err(Error::invalid("compute latency inputs must be positive"));
    }
    Ok(epochs as f64 * cycles_per_sample * samples as f64 / cpu_hz)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub compute_s: f64,
    pub upload_s: f64,
}

impl Latency {
    pub fn total(&self) -> f64 {
        self.compute_s + self.upload_s
    }
}

/// Compute plus upload time for one participant on one sub-channel.
pub fn total_latency(
    profile: &ClientProfile,
    gain: f64,
    plan: &BandwidthPlan,
    noise_w: f64,
    epochs: usize,
) -> Result<Latency> {
    let compute_s = compute_latency(epochs, profile.cycles_per_sample, profile.samples, profile.cpu_hz)?;
    let rate = data_rate(plan.per_participant_hz(), profile.tx_power_w, gain, noise_w)?;
    let upload_s = upload_latency(profile.model_bits, rate).map_err(|e| match e {
        Error::ZeroRate => Error::UnreachableClient(profile.id),
        other => other,
    })?;
    Ok(Latency { compute_s, upload_s })
}

/// Deadline of a round: the slowest selected participant.
pub fn round_deadline(latencies: &[f64]) -> Result<f64> {
    if latencies.is_empty() {
        return Err(Error::invalid("round deadline of an empty selection"));
    }
    Ok(latencies.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}
