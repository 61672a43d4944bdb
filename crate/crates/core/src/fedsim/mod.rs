//! Round-based simulation of random-walk federated averaging and its baselines.

mod accounting;
mod engine;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeasibleSet;
use crate::quantizer::QuantConfig;

pub use accounting::{
    busiest_device_report, decode_full_message, encode_full_message, BusiestDevice, MessageKind,
    MessageRecord, RoundMetrics, FULL_MESSAGE_HEADER_BYTES,
};
pub use engine::{ChainState, DeviceState, LastUpdate, Simulation};

/// Alias matching the engine's role as the owner of every device and chain.
pub type SimState<T> = Simulation<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    DFedRW,
    QDFedRW,
    Dsgd,
    FedAvg,
    DFedAvg,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::DFedRW,
        Algorithm::QDFedRW,
        Algorithm::Dsgd,
        Algorithm::FedAvg,
        Algorithm::DFedAvg,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Algorithm::DFedRW => "dfedrw",
            Algorithm::QDFedRW => "qdfedrw",
            Algorithm::Dsgd => "dsgd",
            Algorithm::FedAvg => "fedavg",
            Algorithm::DFedAvg => "dfedavg",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::config(
                    "algorithm",
                    format!("unknown tag {s:?} (expected dfedrw, qdfedrw, dsgd, fedavg or dfedavg)"),
                )
            })
    }
}

/// How the aggregation fraction `ρ` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AggMode {
    /// Every device aggregates, each from at most `⌈ρn⌉` contributors.
    #[default]
    Contributors,
    /// `⌈ρn⌉` devices aggregate, each from all of its contributing neighbors.
    Aggregators,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub algorithm: Algorithm,
    /// `M`: chains (or sampled devices for the baselines).
    pub chains: usize,
    /// `K`: nominal steps per chain.
    pub epochs: usize,
    /// `h`: percentage of chains truncated to `K′` steps.
    pub hetero_pct: f64,
    /// `K′`.
    pub truncated_epochs: usize,
    /// `ρ`.
    pub agg_fraction: f64,
    pub agg_mode: AggMode,
    pub quant: Option<QuantConfig>,
    /// `R` in `η = 1/(R k̄^q)`.
    pub lr_r: f64,
    /// `q` in `η = 1/(R k̄^q)`.
    pub lr_q: f64,
    /// `φ`: aggregate every `phi` rounds.
    pub phi: u64,
    pub batch_size: usize,
    /// Start each chain where it stopped in the previous round.
    pub inherit_starts: bool,
    pub feasible: FeasibleSet,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            algorithm: Algorithm::DFedRW,
            chains: 10,
            epochs: 5,
            hetero_pct: 0.0,
            truncated_epochs: 1,
            agg_fraction: 0.25,
            agg_mode: AggMode::Contributors,
            quant: None,
            lr_r: 5.0,
            lr_q: 0.499,
            phi: 1,
            batch_size: 50,
            inherit_starts: false,
            feasible: FeasibleSet::Unbounded,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.chains == 0 || self.chains > n {
            return Err(Error::config(
                "training.chains",
                format!("need 1 <= M <= n = {n}, got {}", self.chains),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::config("training.epochs", "K must be >= 1"));
        }
        if self.truncated_epochs == 0 || self.truncated_epochs > self.epochs {
            return Err(Error::config(
                "training.truncated_epochs",
                format!("need 1 <= K′ <= K = {}, got {}", self.epochs, self.truncated_epochs),
            ));
        }
        if !(0.0..=100.0).contains(&self.hetero_pct) {
            return Err(Error::config("training.hetero", "h must lie in [0, 100]"));
        }
        if !(self.agg_fraction > 0.0 && self.agg_fraction <= 1.0) {
            return Err(Error::config("training.agg_fraction", "ρ must lie in (0, 1]"));
        }
        if !(self.lr_r > 0.0 && self.lr_r.is_finite()) {
            return Err(Error::config("training.lr_r", "R must be > 0"));
        }
        if !(self.lr_q > 0.0 && self.lr_q < 1.0) {
            return Err(Error::config("training.lr_q", "q must lie in (0, 1)"));
        }
        if self.phi == 0 {
            return Err(Error::config("training.phi", "φ must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be >= 1"));
        }
        if self.algorithm == Algorithm::QDFedRW && self.quant.is_none() {
            return Err(Error::config("quant", "qdfedrw needs a quantizer configuration"));
        }
        Ok(())
    }

    /// `⌈ρ·n⌉`.
    pub fn agg_target(&self, n: usize) -> usize {
        ((self.agg_fraction * n as f64) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Per-chain step budgets: `round(M·h/100)` uniformly chosen chains get `K′`,
/// the rest `K`.
pub fn assign_chain_lengths<R: Rng + ?Sized>(cfg: &RoundConfig, rng: &mut R) -> Vec<usize> {
    let m = cfg.chains;
    let truncated = ((m as f64 * cfg.hetero_pct / 100.0).round() as usize).min(m);
    let mut lengths = vec![cfg.epochs; m];
    for c in rand::seq::index::sample(rng, m, truncated) {
        lengths[c] = cfg.truncated_epochs;
    }
    lengths
}
