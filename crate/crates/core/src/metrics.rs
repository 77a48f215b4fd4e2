//! Communication accounting and the gamma communication efficiency (GCE).
//!
//! Model uploads are priced at 32 bits per parameter. Distilled uploads are
//! priced per feature at the pixel bit depth (channels are already folded into
//! the flattened dimension) plus `⌈log2 S⌉` bits per label.
//!
//! ```text
//! GCE = ACC / ((1 − ACC)^γ · Σ_t log2(V_t + 1))
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::distill::DistilledDataset;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

pub const BITS_PER_PARAM: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedd3Kip,
    Fedd3Coreset,
    Fedavg,
    Fedprox,
    Fednova,
    Scaffold,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Fedd3Kip,
        Method::Fedd3Coreset,
        Method::Fedavg,
        Method::Fedprox,
        Method::Fednova,
        Method::Scaffold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fedd3Kip => "fedd3_kip",
            Method::Fedd3Coreset => "fedd3_coreset",
            Method::Fedavg => "fedavg",
            Method::Fedprox => "fedprox",
            Method::Fednova => "fednova",
            Method::Scaffold => "scaffold",
        }
    }

    pub fn is_fedd3(self) -> bool {
        matches!(self, Method::Fedd3Kip | Method::Fedd3Coreset)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method {s:?}")))
    }
}

/// Per-client uplink bits for one round of a model-exchanging method.
///
/// With `P = 32·param_count`: FedAvg and FedProx send `P`, FedNova `P + 8`
/// (the local step count rides along), SCAFFOLD `2P` (weights and control
/// variate), so that `log2(V + 1)` reproduces `log2(P+1)`, `log2(P+9)` and
/// `log2(2P+1)`.
pub fn model_uplink_bits(param_count: usize, method: Method) -> Result<u64> {
    if param_count == 0 {
        return Err(invalid("param_count must be at least 1"));
    }
    let p = BITS_PER_PARAM * param_count as u64;
    match method {
        Method::Fedavg | Method::Fedprox => Ok(p),
        Method::Fednova => Ok(p + 8),
        Method::Scaffold => Ok(2 * p),
        m => Err(invalid(format!("{m} does not upload model parameters"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelFormat {
    /// 1 for gray-scale, 3 for RGB; flattened feature vectors use 1.
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_bit_depth")]
    pub bit_depth: u32,
}

fn default_channels() -> usize {
    1
}

fn default_bit_depth() -> u32 {
    8
}

impl Default for PixelFormat {
    fn default() -> Self {
        Self {
            channels: default_channels(),
            bit_depth: default_bit_depth(),
        }
    }
}

/// `⌈log2 S⌉`, the bits needed to index one of `S` classes.
pub fn label_bits(num_classes: usize) -> u64 {
    if num_classes <= 1 {
        0
    } else {
        u64::from(usize::BITS - (num_classes - 1).leading_zeros())
    }
}

/// Bits for `points` flattened vectors of length `dim` plus their labels.
pub fn distilled_bits(
    points: usize,
    dim: usize,
    fmt: PixelFormat,
    num_classes: usize,
) -> Result<u64> {
    if fmt.channels != 1 && fmt.channels != 3 {
        return Err(invalid(format!(
            "channels must be 1 or 3, got {}",
            fmt.channels
        )));
    }
    if !dim.is_multiple_of(fmt.channels) {
        return Err(invalid(format!(
            "dimension {dim} is not divisible by {} channels",
            fmt.channels
        )));
    }
    let n = points as u64;
    Ok(n * dim as u64 * u64::from(fmt.bit_depth) + n * label_bits(num_classes))
}

pub fn distilled_uplink_bits<T: Scalar>(d: &DistilledDataset<T>, fmt: PixelFormat) -> Result<u64> {
    distilled_bits(d.len(), d.dim(), fmt, d.num_classes)
}

/// How per-round volumes enter the logarithmic cost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeAccounting {
    /// `log2(Σ_k V_{t,k} + 1)` per round.
    #[default]
    SummedOverClients,
    /// `Σ_k log2(V_{t,k} + 1)` per round.
    PerClient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundVolume {
    pub round: usize,
    /// Uplink bits of every client that delivered this round.
    pub client_uplink_bits: Vec<u64>,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
}

impl RoundVolume {
    pub fn log2_term(&self, accounting: VolumeAccounting) -> f64 {
        match accounting {
            VolumeAccounting::SummedOverClients => (self.uplink_bits as f64 + 1.0).log2(),
            VolumeAccounting::PerClient => self
                .client_uplink_bits
                .iter()
                .map(|&v| (v as f64 + 1.0).log2())
                .sum(),
        }
    }
}

/// Append-only record of per-round communication.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub method: String,
    rounds: Vec<RoundVolume>,
}

impl CommLedger {
    pub fn new(method: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            rounds: Vec::new(),
        }
    }

    pub fn record(&mut self, client_uplink_bits: Vec<u64>, downlink_bits: u64) {
        let uplink_bits = client_uplink_bits.iter().sum();
        self.rounds.push(RoundVolume {
            round: self.rounds.len() + 1,
            client_uplink_bits,
            uplink_bits,
            downlink_bits,
        });
    }

    pub fn rounds(&self) -> &[RoundVolume] {
        &self.rounds
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn total_uplink_bits(&self) -> u64 {
        self.rounds.iter().map(|r| r.uplink_bits).sum()
    }

    pub fn total_downlink_bits(&self) -> u64 {
        self.rounds.iter().map(|r| r.downlink_bits).sum()
    }

    /// `Σ_t log2(V_t + 1)`.
    pub fn log2_volume(&self, accounting: VolumeAccounting) -> f64 {
        self.rounds.iter().map(|r| r.log2_term(accounting)).sum()
    }

    /// Header `round,method,uplink_bits,downlink_bits,log2_term`.
    pub fn to_csv(&self, accounting: VolumeAccounting) -> String {
        let mut out = String::from("round,method,uplink_bits,downlink_bits,log2_term\n");
        for r in &self.rounds {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.round,
                self.method,
                r.uplink_bits,
                r.downlink_bits,
                r.log2_term(accounting)
            );
        }
        out
    }
}

pub fn gce(acc: f64, gamma: f64, ledger: &CommLedger, accounting: VolumeAccounting) -> Result<f64> {
    gce_from_log2_volume(acc, gamma, ledger.log2_volume(accounting))
}

pub fn gce_from_log2_volume(acc: f64, gamma: f64, log2_volume: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&acc) {
        return Err(invalid(format!("accuracy must lie in [0, 1), got {acc}")));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(invalid(format!("gamma must be > 0, got {gamma}")));
    }
    if !(log2_volume > 0.0) {
        return Err(invalid("communication volume is empty; GCE is undefined"));
    }
    Ok(acc / ((1.0 - acc).powf(gamma) * log2_volume))
}
