//! Scenario description. Parsed from flat TOML; unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::consensus::Timing;
use crate::cross_shard::RetryPolicy;
use crate::epoch::EpochConfig;
use crate::error::{Error, Result};
use crate::model::{BlockSizing, LedgerParams, LockMode, ShardId, Tick};
use crate::sim::{Latency, NetworkModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Honest,
    /// Sends nothing at all.
    Silent,
    /// Leads with two conflicting blocks and votes for everything it sees.
    Equivocate,
    /// Leads with blocks whose state root is wrong.
    InvalidProposal,
    /// Honest, but proposes half a round late.
    Staller,
    /// Honest in consensus, never reveals in the beacon.
    RevealWithholder,
    /// Honest in consensus; the scenario's spam stream is attributed to it.
    DosFlooder,
}

impl Behavior {
    /// Drives its replica with the unmodified state machine.
    pub fn runs_protocol(self) -> bool {
        !matches!(self, Behavior::Silent)
    }

    pub fn is_faulty(self) -> bool {
        !matches!(self, Behavior::Honest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LockModeCfg {
    #[default]
    Fine,
    Full,
}

impl From<LockModeCfg> for LockMode {
    fn from(m: LockModeCfg) -> Self {
        match m {
            LockModeCfg::Fine => LockMode::FineGrained,
            LockModeCfg::Full => LockMode::FullShard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DosDefense {
    #[default]
    None,
    /// Fixed penalty window after a sender exceeds its rate.
    Static,
    /// Penalty doubles with each repeated offence.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub n_nodes: usize,
    pub n_shards: usize,
    pub committee_size: usize,
    pub v_min: usize,
    /// Block size limit in bytes.
    pub block_size: u64,
    /// Bytes per block entry (average transaction size).
    pub tx_bytes: u64,
    pub block_interval: Tick,
    /// 0 disables epoch transitions.
    pub epoch_length: Tick,
    pub w_hi: Option<u64>,
    pub w_lo: Option<u64>,
    /// Ticks during which transactions arrive.
    pub duration: Tick,
    /// Extra ticks allowed for in-flight work to settle.
    pub drain: Tick,
    /// Arrivals per tick, network wide.
    pub tx_rate: f64,
    pub cross_fraction: f64,
    pub n_accounts: usize,
    pub initial_balance: u64,
    /// Zipf exponent for sender choice; 0 means uniform.
    pub zipf: f64,
    /// Lay accounts out in key space by popularity rank so hot accounts
    /// share a shard.
    pub zipf_by_key: bool,
    pub max_amount: u64,
    pub max_fee: u64,
    pub malicious_fraction: f64,
    /// Behaviours assigned round-robin to the malicious nodes.
    pub behaviors: Vec<Behavior>,
    pub lock_mode: LockModeCfg,
    pub latency_lo: Tick,
    pub latency_hi: Tick,
    pub drop_rate: f64,
    pub tau: Tick,
    pub r_max: u64,
    pub lock_ttl: Tick,
    pub backoff_base: Tick,
    pub backoff_max: Tick,
    pub max_attempts: u32,
    pub fee_weight: f64,
    /// Probability that a destination rejects a staged credit outright.
    pub inject_reject_rate: f64,
    /// Probability that a lock message is held back past the lock lifetime.
    pub inject_delay_rate: f64,
    /// Spam rate as a multiple of the per-shard honest rate; 0 disables.
    pub dos_multiplier: f64,
    pub dos_target_shard: u32,
    pub dos_senders: usize,
    pub dos_defense: DosDefense,
    pub rate_window: Tick,
    /// Admissions per sender per window.
    pub rate_limit: u32,
    pub rate_penalty: Tick,
    pub ticks_per_second: u64,
    /// Keep every trace row in memory (needed for replay files).
    pub record_trace: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            n_nodes: 25,
            n_shards: 5,
            committee_size: 5,
            v_min: 4,
            block_size: 16 * 1024,
            tx_bytes: 256,
            block_interval: 50,
            epoch_length: 0,
            w_hi: None,
            w_lo: None,
            duration: 2000,
            drain: 4000,
            tx_rate: 1.0,
            cross_fraction: 0.1,
            n_accounts: 1000,
            initial_balance: 1_000_000,
            zipf: 0.0,
            zipf_by_key: false,
            max_amount: 10,
            max_fee: 10,
            malicious_fraction: 0.0,
            behaviors: vec![Behavior::Silent, Behavior::Equivocate],
            lock_mode: LockModeCfg::Fine,
            latency_lo: 3,
            latency_hi: 7,
            drop_rate: 0.0,
            tau: 50,
            r_max: 8,
            lock_ttl: 400,
            backoff_base: 16,
            backoff_max: 512,
            max_attempts: 6,
            fee_weight: 1.0,
            inject_reject_rate: 0.0,
            inject_delay_rate: 0.0,
            dos_multiplier: 0.0,
            dos_target_shard: 0,
            dos_senders: 10,
            dos_defense: DosDefense::None,
            rate_window: 100,
            rate_limit: 20,
            rate_penalty: 200,
            ticks_per_second: 1000,
            record_trace: false,
        }
    }
}

fn prob(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be in [0, 1], got {v}")))
    }
}

impl ScenarioConfig {
    /// Parses TOML text and validates it.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_shards == 0 {
            return Err(Error::config("n_shards must be positive"));
        }
        if self.committee_size * self.n_shards > self.n_nodes {
            return Err(Error::config(format!(
                "committee_size {} x n_shards {} exceeds n_nodes {}",
                self.committee_size, self.n_shards, self.n_nodes
            )));
        }
        if !(0.0..1.0).contains(&self.malicious_fraction) {
            return Err(Error::config("malicious_fraction must be in [0, 1)"));
        }
        if self.malicious_fraction > 0.0 && self.behaviors.is_empty() {
            return Err(Error::config("malicious nodes need at least one behavior"));
        }
        prob("cross_fraction", self.cross_fraction)?;
        prob("drop_rate", self.drop_rate)?;
        prob("inject_reject_rate", self.inject_reject_rate)?;
        prob("inject_delay_rate", self.inject_delay_rate)?;
        if self.tx_rate.is_nan() || self.tx_rate < 0.0 {
            return Err(Error::config("tx_rate must be non-negative"));
        }
        if self.zipf < 0.0 || self.dos_multiplier < 0.0 || self.fee_weight < 0.0 {
            return Err(Error::config(
                "zipf, dos_multiplier and fee_weight must be non-negative",
            ));
        }
        if self.n_accounts < 2 {
            return Err(Error::config("need at least two accounts"));
        }
        if self.latency_lo > self.latency_hi {
            return Err(Error::config("latency_lo exceeds latency_hi"));
        }
        if self.block_interval == 0 || self.tau == 0 || self.lock_ttl == 0 || self.duration == 0 {
            return Err(Error::config(
                "block_interval, tau, lock_ttl and duration must be positive",
            ));
        }
        if self.ticks_per_second == 0 {
            return Err(Error::config("ticks_per_second must be positive"));
        }
        if self.tx_bytes == 0 || self.sizing().capacity(self.block_size) == 0 {
            return Err(Error::config("block_size cannot hold a single transaction"));
        }
        if self.dos_multiplier > 0.0 {
            if self.dos_target_shard as usize >= self.n_shards {
                return Err(Error::config("dos_target_shard is not a genesis shard"));
            }
            if self.dos_senders == 0 {
                return Err(Error::config("dos_senders must be positive"));
            }
        }
        if self.dos_defense != DosDefense::None && (self.rate_window == 0 || self.rate_limit == 0) {
            return Err(Error::config("rate limiting needs a positive window and limit"));
        }
        if self.max_attempts == 0 {
            return Err(Error::config("max_attempts must be positive"));
        }
        self.epoch_config().validate()?;
        if self.epoch_length > 0 && self.epoch_length <= self.lock_ttl {
            return Err(Error::config("epoch_length must exceed lock_ttl"));
        }
        Ok(())
    }

    pub fn timing(&self) -> Timing {
        Timing {
            tau: self.tau,
            round0_offset: self.block_interval,
            r_max: self.r_max,
        }
    }

    pub fn network(&self) -> NetworkModel {
        NetworkModel {
            latency: if self.latency_lo == self.latency_hi {
                Latency::Fixed(self.latency_lo)
            } else {
                Latency::Uniform {
                    lo: self.latency_lo,
                    hi: self.latency_hi,
                }
            },
            drop_rate: self.drop_rate,
            partition: Default::default(),
        }
    }

    pub fn ledger_params(&self) -> LedgerParams {
        LedgerParams {
            lock_ttl: self.lock_ttl,
            mode: self.lock_mode.into(),
        }
    }

    pub fn sizing(&self) -> BlockSizing {
        BlockSizing {
            entry_bytes: self.tx_bytes,
            ..BlockSizing::default()
        }
    }

    /// Entries per block.
    pub fn block_capacity(&self) -> usize {
        self.sizing().capacity(self.block_size)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            base: self.backoff_base.max(1),
            max_delay: self.backoff_max.max(1),
            max_attempts: self.max_attempts,
            fee_weight: self.fee_weight,
            fee_norm: self.max_fee.max(1),
            ..RetryPolicy::default()
        }
    }

    pub fn epoch_config(&self) -> EpochConfig {
        EpochConfig {
            length: self.epoch_length,
            w_hi: self.w_hi,
            w_lo: self.w_lo,
            v_min: self.v_min,
            committee_size: self.committee_size,
            ..EpochConfig::default()
        }
    }

    pub fn malicious_count(&self) -> usize {
        (self.malicious_fraction * self.n_nodes as f64).round() as usize
    }

    pub fn dos_target(&self) -> ShardId {
        ShardId(self.dos_target_shard)
    }
}
