//! Slot-based HARQ protocols over a pluggable decoding backend.
//!
//! Every slot the protocol schedules blocks onto bands, the backend observes
//! each band, and the receiver runs an ordered SIC pass per band (descending
//! received power) followed by a sweep over buffered blocks that were not
//! transmitted this slot but whose interference has since been cancelled.
//! Copies of a block are always combined (MRC) across every slot and band in
//! which it was sent. Each decode attempt costs `gamma = alpha * L`.
//!
//! UE roles follow config order: UE index 0 is the cell-centre UE (UE1),
//! index 1 the cell-edge UE (UE2) and, for dynamic pairing, index 2 the
//! re-pairing candidate (UE0).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phy::{
    complex_gaussian, compose_received, transmit_symbols, ChannelRealization, CodeConfig,
    FrameConfig, ModScheme, PhyError, ReceivedGrid, UeTxConfig,
};
use crate::rx::{demap_decode, mrc_combine, LinkContext, RxError, RxPolicy, SicRun};

pub const DEFAULT_MAX_RETX: usize = 4;

/// Relative slack on the accumulate-SINR threshold test.
const THRESHOLD_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum HarqError {
    #[error("invalid HARQ configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Phy(#[from] PhyError),
    #[error(transparent)]
    Rx(#[from] RxError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    BaselineRtd,
    SmartHarq,
    DynamicPairing,
    MaAdaptation,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::BaselineRtd => "baseline_rtd",
            Protocol::SmartHarq => "smart_harq",
            Protocol::DynamicPairing => "dynamic_pairing",
            Protocol::MaAdaptation => "ma_adaptation",
        })
    }
}

/// Large-scale channel gain, drawn once per episode and then held static.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainSpec {
    Fixed(f64),
    TwoState { low: f64, high: f64, p_low: f64 },
    /// Exponentially distributed power gain with the given mean.
    Rayleigh { mean: f64 },
}

impl GainSpec {
    fn validate(&self) -> Result<(), HarqError> {
        let ok = match *self {
            GainSpec::Fixed(g) => g >= 0.0 && g.is_finite(),
            GainSpec::TwoState { low, high, p_low } => {
                low >= 0.0 && high >= 0.0 && low.is_finite() && high.is_finite() && (0.0..=1.0).contains(&p_low)
            }
            GainSpec::Rayleigh { mean } => mean > 0.0 && mean.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(HarqError::Config(format!("bad gain spec {self:?}")))
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            GainSpec::Fixed(g) => g,
            GainSpec::TwoState { low, high, p_low } => {
                if rng.random::<f64>() < p_low {
                    low
                } else {
                    high
                }
            }
            GainSpec::Rayleigh { mean } => Exp::new(1.0 / mean).expect("positive mean").sample(rng),
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UeSpec {
    pub gain: GainSpec,
    #[serde(default = "one")]
    pub power: f64,
    /// Rate demand in bits per symbol (abstract backend).
    #[serde(default = "one")]
    pub rate: f64,
}

impl UeSpec {
    pub fn threshold(&self) -> f64 {
        self.rate.exp2() - 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarqConfig {
    pub protocol: Protocol,
    /// Maximum retransmissions `M` per block.
    pub max_retx: usize,
    pub blocks_per_ue: usize,
    /// Every UE always has a new block ready; the episode runs `max_slots`.
    pub full_buffer: bool,
    pub max_slots: usize,
    pub rx_policy: RxPolicy,
    /// Decode cost per spread-length unit.
    pub gamma_alpha: f64,
    pub spread_length: usize,
    /// Combine the first copy of UE1's block with its re-paired
    /// retransmissions (dynamic pairing).
    pub combine_first_copy: bool,
    /// Information bits per block for throughput (abstract backend).
    pub block_bits: usize,
    pub ues: Vec<UeSpec>,
}

impl Default for HarqConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::BaselineRtd,
            max_retx: DEFAULT_MAX_RETX,
            blocks_per_ue: 1,
            full_buffer: false,
            max_slots: 64,
            rx_policy: RxPolicy::FullSic,
            gamma_alpha: 1.0,
            spread_length: 4,
            combine_first_copy: true,
            block_bits: 160,
            ues: vec![
                UeSpec {
                    gain: GainSpec::TwoState { low: 1.5, high: 3.0, p_low: 0.5 },
                    power: 1.0,
                    rate: 1.0,
                },
                UeSpec {
                    gain: GainSpec::TwoState { low: 0.6, high: 1.2, p_low: 0.5 },
                    power: 1.0,
                    rate: 1.0,
                },
            ],
        }
    }
}

impl HarqConfig {
    /// `Gamma(L) = alpha * L`.
    pub fn gamma(&self) -> f64 {
        self.gamma_alpha * self.spread_length as f64
    }

    pub fn validate(&self) -> Result<(), HarqError> {
        let n = self.ues.len();
        let need = match self.protocol {
            Protocol::BaselineRtd => n >= 1,
            Protocol::SmartHarq | Protocol::MaAdaptation => n == 2,
            Protocol::DynamicPairing => n == 2 || n == 3,
        };
        if !need {
            return Err(HarqError::Config(format!("{} does not support {n} UEs", self.protocol)));
        }
        if self.max_slots == 0 {
            return Err(HarqError::Config("max_slots must be positive".into()));
        }
        if !self.full_buffer && self.blocks_per_ue == 0 {
            return Err(HarqError::Config("blocks_per_ue must be positive".into()));
        }
        if !(self.gamma_alpha >= 0.0 && self.gamma_alpha.is_finite()) || self.spread_length == 0 {
            return Err(HarqError::Config("decode cost needs alpha >= 0 and L >= 1".into()));
        }
        for ue in &self.ues {
            ue.gain.validate()?;
            if !(ue.power >= 0.0 && ue.power.is_finite()) || !(ue.rate > 0.0 && ue.rate.is_finite()) {
                return Err(HarqError::Config(format!("bad UE spec {ue:?}")));
            }
        }
        Ok(())
    }

    fn bands(&self) -> usize {
        match self.protocol {
            Protocol::BaselineRtd | Protocol::SmartHarq => 1,
            Protocol::DynamicPairing | Protocol::MaAdaptation => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId {
    pub ue: usize,
    pub seq: usize,
}

/// One block sent on one band in one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transmission {
    pub block: BlockId,
    /// Large-scale received power `g * p`.
    pub rx_power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attempt {
    pub success: bool,
    /// Combined SINR over all copies (linear).
    pub sinr: f64,
}

/// Decoding model. Observations are numbered in the order they are passed to
/// [`Backend::observe`].
pub trait Backend {
    fn observe(&mut self, txs: &[Transmission]) -> Result<(), HarqError>;

    /// MRC over the listed observations, treating blocks in `decoded` as
    /// cancelled.
    fn attempt(
        &mut self,
        block: BlockId,
        copies: &[usize],
        obs: &[Vec<Transmission>],
        decoded: &HashSet<BlockId>,
    ) -> Result<Attempt, HarqError>;

    fn block_bits(&self, ue: usize) -> usize;
}

/// Accumulate-SINR abstraction: a copy contributes
/// `P / (1 + sum of undecoded co-located P_j)`; the block decodes once the
/// sum reaches `2^R - 1`.
#[derive(Debug, Clone)]
pub struct AbstractBackend {
    thresholds: Vec<f64>,
    block_bits: usize,
}

impl AbstractBackend {
    pub fn new(thresholds: Vec<f64>, block_bits: usize) -> Self {
        Self { thresholds, block_bits }
    }
}

fn copy_position(obs: &[Transmission], block: BlockId) -> Result<usize, HarqError> {
    obs.iter()
        .position(|t| t.block == block)
        .ok_or_else(|| HarqError::Config(format!("copy list of {block:?} names a foreign observation")))
}

impl Backend for AbstractBackend {
    fn observe(&mut self, _txs: &[Transmission]) -> Result<(), HarqError> {
        Ok(())
    }

    fn attempt(
        &mut self,
        block: BlockId,
        copies: &[usize],
        obs: &[Vec<Transmission>],
        decoded: &HashSet<BlockId>,
    ) -> Result<Attempt, HarqError> {
        let mut sinr = 0.0;
        for &c in copies {
            let txs = &obs[c];
            let me = txs[copy_position(txs, block)?];
            let interference: f64 = txs
                .iter()
                .filter(|t| t.block != block && !decoded.contains(&t.block))
                .map(|t| t.rx_power)
                .sum();
            sinr += me.rx_power / (1.0 + interference);
        }
        let theta = self.thresholds[block.ue];
        Ok(Attempt {
            success: sinr >= theta * (1.0 - THRESHOLD_SLACK),
            sinr,
        })
    }

    fn block_bits(&self, _ue: usize) -> usize {
        self.block_bits
    }
}

/// Link parameters of the full-chain backend. Within an observation the
/// `i`-th transmission uses signature `i` of the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PhyBackendConfig {
    pub frame: FrameConfig,
    pub modulation: ModScheme,
    pub tbs_bytes: usize,
    pub code: CodeConfig,
}

/// Full transmitter/receiver chain on a static block-flat channel scaled by
/// the large-scale gain, unit noise variance and exact CSI.
pub struct PhyBackend {
    cfg: PhyBackendConfig,
    powers: Vec<f64>,
    /// Static coefficients `[ue][antenna]`.
    coeffs: Vec<Vec<Complex64>>,
    rng: ChaCha8Rng,
    payloads: BTreeMap<BlockId, Vec<u8>>,
    grids: Vec<ReceivedGrid>,
}

impl PhyBackend {
    pub fn new(cfg: PhyBackendConfig, gains: &[f64], powers: &[f64], mut rng: ChaCha8Rng) -> Result<Self, HarqError> {
        cfg.frame.validate()?;
        let n_rx = cfg.frame.receive_antennas;
        let coeffs = gains
            .iter()
            .map(|g| (0..n_rx).map(|_| complex_gaussian(&mut rng, 1.0) * g.sqrt()).collect())
            .collect();
        Ok(Self {
            cfg,
            powers: powers.to_vec(),
            coeffs,
            rng,
            payloads: BTreeMap::new(),
            grids: Vec::new(),
        })
    }

    fn info_bits(&self) -> usize {
        self.cfg.tbs_bytes * 8
    }

    fn obs_setup(&self, txs: &[Transmission]) -> (Vec<UeTxConfig>, ChannelRealization) {
        let frame = &self.cfg.frame;
        let n_rx = frame.receive_antennas;
        let n_re = frame.re_count();
        let ues = txs
            .iter()
            .enumerate()
            .map(|(pos, t)| UeTxConfig {
                power: self.powers[t.block.ue],
                signature: pos,
                modulation: self.cfg.modulation,
                tbs_bytes: self.cfg.tbs_bytes,
                code: self.cfg.code,
            })
            .collect();
        let mut gains = Vec::with_capacity(txs.len() * n_rx * n_re);
        for t in txs {
            for rx in 0..n_rx {
                gains.extend(std::iter::repeat_n(self.coeffs[t.block.ue][rx], n_re));
            }
        }
        (ues, ChannelRealization::from_gains(txs.len(), n_rx, n_re, gains))
    }
}

impl Backend for PhyBackend {
    fn observe(&mut self, txs: &[Transmission]) -> Result<(), HarqError> {
        let info = self.info_bits();
        for t in txs {
            if !self.payloads.contains_key(&t.block) {
                let bits = (0..info).map(|_| self.rng.random_range(0..2u8)).collect();
                self.payloads.insert(t.block, bits);
            }
        }
        let (ues, ch) = self.obs_setup(txs);
        let frame = &self.cfg.frame;
        let syms = ues
            .iter()
            .zip(txs)
            .map(|(u, t)| transmit_symbols(&self.payloads[&t.block], u, &frame.layout(u.signature)?))
            .collect::<Result<Vec<_>, _>>()?;
        let grid = compose_received(frame, &ues, &syms, &ch, 1.0, &mut self.rng)?;
        self.grids.push(grid);
        Ok(())
    }

    fn attempt(
        &mut self,
        block: BlockId,
        copies: &[usize],
        obs: &[Vec<Transmission>],
        decoded: &HashSet<BlockId>,
    ) -> Result<Attempt, HarqError> {
        let mut soft = Vec::with_capacity(copies.len());
        for &c in copies {
            let txs = &obs[c];
            let me = copy_position(txs, block)?;
            let (ues, ch) = self.obs_setup(txs);
            let ctx = LinkContext::new(&self.cfg.frame, &ues, &ch, 1.0)?;
            let mut y = self.grids[c].clone();
            let mut active = vec![me];
            for (pos, t) in txs.iter().enumerate() {
                if pos == me {
                    continue;
                }
                if decoded.contains(&t.block) {
                    ctx.cancel(&mut y, pos, &self.payloads[&t.block])?;
                } else {
                    active.push(pos);
                }
            }
            soft.push(ctx.detect(&y, &active)?.swap_remove(0));
        }
        let combined = mrc_combine(&soft)?;
        let out = demap_decode(&combined, self.cfg.modulation, &self.cfg.code, self.info_bits())?;
        Ok(Attempt {
            success: out.crc_pass,
            sinr: combined.mean_sinr(),
        })
    }

    fn block_bits(&self, _ue: usize) -> usize {
        self.info_bits()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Abstract,
    Phy(PhyBackendConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    New,
    Retx,
    /// Decoded from the buffer without being sent this slot.
    Buffered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    Ack,
    Nack,
    Delay,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub slot: usize,
    pub ue: usize,
    /// Per-UE block sequence number.
    pub block: usize,
    pub action: Action,
    pub band: Option<usize>,
    pub outcome: Feedback,
    /// Combined SINR of this slot's last attempt, dB.
    pub sinr: Option<f64>,
}

pub fn trace_to_json(trace: &[TraceEvent]) -> String {
    serde_json::to_string_pretty(trace).expect("trace serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotCost {
    pub slot: usize,
    pub decode_cost: f64,
    pub attempts: usize,
    /// Bands whose first SIC attempt failed.
    pub first_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarqMetrics {
    /// Mean retransmissions per transmitted block, per UE.
    pub retransmissions: Vec<f64>,
    pub decoded: Vec<usize>,
    pub dropped: Vec<usize>,
    /// Mean slots from first transmission to ACK over decoded blocks.
    pub delay_slots: f64,
    /// Total decode cost in `Gamma` units (`alpha * L` per attempt).
    pub decode_cost: f64,
    /// Decoded information bits per slot, per UE.
    pub throughput: Vec<f64>,
    pub total_throughput: f64,
    pub fairness: f64,
    pub slots: usize,
    /// Dynamic pairing ran without a re-pairing candidate.
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub metrics: HarqMetrics,
    pub gains: Vec<f64>,
    pub trace: Vec<TraceEvent>,
    pub slot_costs: Vec<SlotCost>,
}

/// Jain's index `(sum x)^2 / (n sum x^2)`; 1 when every entry is zero.
pub fn jain_fairness(x: &[f64]) -> f64 {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    if x.is_empty() || sq == 0.0 {
        return 1.0;
    }
    let s: f64 = x.iter().sum();
    s * s / (x.len() as f64 * sq)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Status {
    Live,
    Decoded(usize),
    Dropped,
}

#[derive(Debug, Clone)]
struct Block {
    copies: Vec<usize>,
    tx_count: usize,
    first_slot: usize,
    status: Status,
    dirty: bool,
    repaired: bool,
    last_sinr: Option<f64>,
}

struct Engine<'a, B: Backend> {
    cfg: &'a HarqConfig,
    backend: B,
    rx_power: Vec<f64>,
    blocks: BTreeMap<BlockId, Block>,
    decoded: HashSet<BlockId>,
    obs: Vec<Vec<Transmission>>,
    next_seq: Vec<usize>,
    pending: Vec<BTreeSet<usize>>,
    trace: Vec<TraceEvent>,
    slot_costs: Vec<SlotCost>,
    decode_cost: f64,
}

impl<'a, B: Backend> Engine<'a, B> {
    fn new(cfg: &'a HarqConfig, backend: B, gains: &[f64]) -> Self {
        let n = cfg.ues.len();
        Self {
            cfg,
            backend,
            rx_power: cfg.ues.iter().zip(gains).map(|(u, g)| u.power * g).collect(),
            blocks: BTreeMap::new(),
            decoded: HashSet::new(),
            obs: Vec::new(),
            next_seq: vec![0; n],
            pending: vec![BTreeSet::new(); n],
            trace: Vec::new(),
            slot_costs: Vec::new(),
            decode_cost: 0.0,
        }
    }

    fn has_new(&self, ue: usize) -> bool {
        self.cfg.full_buffer || self.next_seq[ue] < self.cfg.blocks_per_ue
    }

    fn take_new(&mut self, ue: usize) -> Option<BlockId> {
        if !self.has_new(ue) {
            return None;
        }
        let id = BlockId { ue, seq: self.next_seq[ue] };
        self.next_seq[ue] += 1;
        Some(id)
    }

    /// Oldest pending block of `ue`, else a new one.
    fn next_block(&mut self, ue: usize) -> Option<BlockId> {
        match self.pending[ue].first() {
            Some(&seq) => Some(BlockId { ue, seq }),
            None => self.take_new(ue),
        }
    }

    fn is_retx(&self, ue: usize) -> bool {
        !self.pending[ue].is_empty()
    }

    fn done(&self) -> bool {
        !self.cfg.full_buffer && (0..self.cfg.ues.len()).all(|u| self.pending[u].is_empty() && !self.has_new(u))
    }

    fn attempt(&mut self, id: BlockId, slot: usize) -> Result<bool, HarqError> {
        let copies = self.blocks[&id].copies.clone();
        let res = self.backend.attempt(id, &copies, &self.obs, &self.decoded)?;
        self.decode_cost += self.cfg.gamma();
        let b = self.blocks.get_mut(&id).expect("block exists");
        b.dirty = false;
        b.last_sinr = Some(res.sinr);
        if res.success {
            b.status = Status::Decoded(slot);
            self.decoded.insert(id);
            for &c in &copies {
                for t in &self.obs[c] {
                    if let Some(o) = self.blocks.get_mut(&t.block) {
                        if o.status == Status::Live {
                            o.dirty = true;
                        }
                    }
                }
            }
        }
        Ok(res.success)
    }

    /// Transmits `schedule[band]`, decodes, drops exhausted blocks. Returns
    /// the blocks sent this slot.
    fn run_slot(&mut self, slot: usize, schedule: &[Vec<BlockId>]) -> Result<Vec<BlockId>, HarqError> {
        let cost_before = self.decode_cost;
        let mut sent: Vec<BlockId> = Vec::new();
        for txs in schedule.iter() {
            let band_txs: Vec<Transmission> = txs
                .iter()
                .map(|&block| Transmission { block, rx_power: self.rx_power[block.ue] })
                .collect();
            if band_txs.is_empty() {
                continue;
            }
            self.backend.observe(&band_txs)?;
            let obs_id = self.obs.len();
            self.obs.push(band_txs);
            for &id in txs {
                let b = self.blocks.entry(id).or_insert(Block {
                    copies: Vec::new(),
                    tx_count: 0,
                    first_slot: slot,
                    status: Status::Live,
                    dirty: true,
                    repaired: false,
                    last_sinr: None,
                });
                b.copies.push(obs_id);
                b.dirty = true;
                if !sent.contains(&id) {
                    b.tx_count += 1;
                    sent.push(id);
                }
            }
        }

        let mut skipped: HashSet<BlockId> = HashSet::new();
        let mut attempts = 0;
        let mut first_failures = 0;
        for txs in schedule {
            let mut order = txs.clone();
            order.sort_by(|a, b| self.rx_power[b.ue].total_cmp(&self.rx_power[a.ue]).then(a.ue.cmp(&b.ue)));
            let mut first = true;
            let mut skip_rest = false;
            for id in order {
                let b = &self.blocks[&id];
                if b.status != Status::Live || !b.dirty || skipped.contains(&id) {
                    continue;
                }
                if skip_rest {
                    skipped.insert(id);
                    continue;
                }
                let ok = self.attempt(id, slot)?;
                attempts += 1;
                if first && !ok {
                    first_failures += 1;
                    if self.cfg.rx_policy == RxPolicy::SkipOnFirstFailure {
                        skip_rest = true;
                    }
                }
                first = false;
            }
        }

        loop {
            let candidate = self
                .blocks
                .iter()
                .find(|(id, b)| b.status == Status::Live && b.dirty && !sent.contains(id) && !skipped.contains(id))
                .map(|(id, _)| *id);
            let Some(id) = candidate else { break };
            attempts += 1;
            if self.attempt(id, slot)? {
                self.trace.push(TraceEvent {
                    slot,
                    ue: id.ue,
                    block: id.seq,
                    action: Action::Buffered,
                    band: None,
                    outcome: Feedback::Ack,
                    sinr: self.blocks[&id].last_sinr.map(to_db),
                });
            }
        }

        for &id in &sent {
            let b = self.blocks.get_mut(&id).expect("sent block exists");
            if b.status == Status::Live && b.tx_count > self.cfg.max_retx {
                b.status = Status::Dropped;
            }
        }
        for ue in 0..self.pending.len() {
            let blocks = &self.blocks;
            self.pending[ue].retain(|&seq| blocks[&BlockId { ue, seq }].status == Status::Live);
        }
        self.slot_costs.push(SlotCost {
            slot,
            decode_cost: self.decode_cost - cost_before,
            attempts,
            first_failures,
        });
        Ok(sent)
    }

    fn live(&self, id: BlockId) -> bool {
        self.blocks[&id].status == Status::Live
    }

    /// Trace entries and feedback for the blocks of this slot; failed live
    /// blocks join their UE's pending set.
    fn feedback(&mut self, slot: usize, schedule: &[Vec<BlockId>], delayed: &HashSet<BlockId>) {
        let mut seen: HashSet<BlockId> = HashSet::new();
        for (band, txs) in schedule.iter().enumerate() {
            for &id in txs {
                let b = &self.blocks[&id];
                let outcome = match b.status {
                    Status::Decoded(_) => Feedback::Ack,
                    Status::Dropped => Feedback::Drop,
                    Status::Live if delayed.contains(&id) => Feedback::Delay,
                    Status::Live => Feedback::Nack,
                };
                self.trace.push(TraceEvent {
                    slot,
                    ue: id.ue,
                    block: id.seq,
                    action: if b.tx_count > 1 { Action::Retx } else { Action::New },
                    band: Some(band),
                    outcome,
                    sinr: b.last_sinr.map(to_db),
                });
                if outcome == Feedback::Nack || outcome == Feedback::Delay {
                    seen.insert(id);
                }
            }
        }
        for id in seen {
            self.pending[id.ue].insert(id.seq);
        }
    }

    fn metrics(&self, slots: usize, degraded: bool) -> HarqMetrics {
        let n = self.cfg.ues.len();
        let mut retx = vec![0.0; n];
        let mut sent = vec![0usize; n];
        let mut decoded = vec![0usize; n];
        let mut dropped = vec![0usize; n];
        let mut delay = (0.0, 0usize);
        for (id, b) in &self.blocks {
            sent[id.ue] += 1;
            retx[id.ue] += (b.tx_count - 1) as f64;
            match b.status {
                Status::Decoded(s) => {
                    decoded[id.ue] += 1;
                    delay.0 += (s + 1 - b.first_slot) as f64;
                    delay.1 += 1;
                }
                Status::Dropped => dropped[id.ue] += 1,
                Status::Live => {}
            }
        }
        for u in 0..n {
            if sent[u] > 0 {
                retx[u] /= sent[u] as f64;
            }
        }
        let throughput: Vec<f64> = (0..n)
            .map(|u| (decoded[u] * self.backend.block_bits(u)) as f64 / slots.max(1) as f64)
            .collect();
        HarqMetrics {
            retransmissions: retx,
            decoded,
            dropped,
            delay_slots: if delay.1 > 0 { delay.0 / delay.1 as f64 } else { 0.0 },
            decode_cost: self.decode_cost,
            total_throughput: throughput.iter().sum(),
            fairness: jain_fairness(&throughput),
            throughput,
            slots,
            degraded,
        }
    }
}

fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

fn drive<B: Backend>(cfg: &HarqConfig, backend: B, gains: Vec<f64>) -> Result<EpisodeResult, HarqError> {
    let mut e = Engine::new(cfg, backend, &gains);
    let degraded = cfg.protocol == Protocol::DynamicPairing && cfg.ues.len() < 3;
    let protocol = if degraded { Protocol::BaselineRtd } else { cfg.protocol };
    let bands = if degraded { 1 } else { cfg.bands() };
    // smart HARQ: UE1 block whose retransmissions hold back UE2
    let mut gate: Option<BlockId> = None;
    let mut slot = 0;
    while slot < cfg.max_slots && !e.done() {
        let mut schedule: Vec<Vec<BlockId>> = vec![Vec::new(); bands];
        match protocol {
            Protocol::BaselineRtd => {
                for ue in 0..cfg.ues.len() {
                    if let Some(id) = e.next_block(ue) {
                        schedule[0].push(id);
                    }
                }
            }
            Protocol::SmartHarq => {
                schedule[0].extend(e.next_block(0));
                let ue2 = if gate.is_some() { e.take_new(1) } else { e.next_block(1) };
                schedule[0].extend(ue2);
            }
            Protocol::DynamicPairing => {
                let repair = e.is_retx(0);
                let b1 = e.next_block(0);
                let b2 = e.next_block(1);
                let b0 = e.next_block(2);
                if repair {
                    if let Some(id) = b1 {
                        if !cfg.combine_first_copy {
                            if let Some(b) = e.blocks.get_mut(&id) {
                                if !b.repaired {
                                    b.copies.clear();
                                }
                            }
                        }
                        if let Some(b) = e.blocks.get_mut(&id) {
                            b.repaired = true;
                        }
                    }
                    schedule[0].extend(b1);
                    schedule[0].extend(b0);
                    schedule[1].extend(b2);
                } else {
                    schedule[0].extend(b1);
                    schedule[0].extend(b2);
                    schedule[1].extend(b0);
                }
            }
            Protocol::MaAdaptation => {
                for ue in 0..2 {
                    let retx = e.is_retx(ue);
                    if let Some(id) = e.next_block(ue) {
                        if retx {
                            for band in schedule.iter_mut() {
                                band.push(id);
                            }
                        } else {
                            schedule[ue].push(id);
                        }
                    }
                }
            }
        }
        let sent = e.run_slot(slot, &schedule)?;
        let mut delayed = HashSet::new();
        if protocol == Protocol::SmartHarq {
            if let Some(g) = gate {
                if !e.live(g) {
                    gate = None;
                }
            }
            let b1 = sent.iter().copied().find(|b| b.ue == 0);
            let b2 = sent.iter().copied().find(|b| b.ue == 1);
            if gate.is_none() {
                if let (Some(b1), Some(b2)) = (b1, b2) {
                    if e.live(b1) && !e.decoded.contains(&b2) {
                        gate = Some(b1);
                    }
                }
            }
            if gate.is_some() {
                delayed.extend(b2.filter(|&b| e.live(b)));
            }
        }
        e.feedback(slot, &schedule, &delayed);
        slot += 1;
    }
    Ok(EpisodeResult {
        metrics: e.metrics(slot, degraded),
        gains,
        trace: e.trace,
        slot_costs: e.slot_costs,
    })
}

/// Runs one episode. Gains are drawn first from the seeded stream, then the
/// backend consumes the rest.
pub fn run_episode(cfg: &HarqConfig, backend: &BackendSpec, seed: u64) -> Result<EpisodeResult, HarqError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gains: Vec<f64> = cfg.ues.iter().map(|u| u.gain.draw(&mut rng)).collect();
    run_episode_with_gains(cfg, backend, gains, rng)
}

/// Runs one episode on given large-scale gains.
pub fn run_episode_with_gains(
    cfg: &HarqConfig,
    backend: &BackendSpec,
    gains: Vec<f64>,
    rng: ChaCha8Rng,
) -> Result<EpisodeResult, HarqError> {
    cfg.validate()?;
    if gains.len() != cfg.ues.len() {
        return Err(HarqError::Config(format!("{} gains for {} UEs", gains.len(), cfg.ues.len())));
    }
    match backend {
        BackendSpec::Abstract => {
            let b = AbstractBackend::new(cfg.ues.iter().map(UeSpec::threshold).collect(), cfg.block_bits);
            drive(cfg, b, gains)
        }
        BackendSpec::Phy(p) => {
            let powers: Vec<f64> = cfg.ues.iter().map(|u| u.power).collect();
            let b = PhyBackend::new(p.clone(), &gains, &powers, rng)?;
            drive(cfg, b, gains)
        }
    }
}

fn with_protocol(cfg: &HarqConfig, protocol: Protocol) -> HarqConfig {
    HarqConfig { protocol, ..cfg.clone() }
}

pub fn run_baseline_rtd(cfg: &HarqConfig, backend: &BackendSpec, seed: u64) -> Result<HarqMetrics, HarqError> {
    Ok(run_episode(&with_protocol(cfg, Protocol::BaselineRtd), backend, seed)?.metrics)
}

pub fn run_smart_harq(cfg: &HarqConfig, backend: &BackendSpec, seed: u64) -> Result<HarqMetrics, HarqError> {
    Ok(run_episode(&with_protocol(cfg, Protocol::SmartHarq), backend, seed)?.metrics)
}

pub fn run_dynamic_pairing(cfg: &HarqConfig, backend: &BackendSpec, seed: u64) -> Result<HarqMetrics, HarqError> {
    Ok(run_episode(&with_protocol(cfg, Protocol::DynamicPairing), backend, seed)?.metrics)
}

pub fn run_ma_adaptation(cfg: &HarqConfig, backend: &BackendSpec, seed: u64) -> Result<HarqMetrics, HarqError> {
    Ok(run_episode(&with_protocol(cfg, Protocol::MaAdaptation), backend, seed)?.metrics)
}

/// Receiver adaptation applied to one full SIC pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedSlot {
    pub outcomes: Vec<crate::rx::DecodeOutcome>,
    /// UEs left undecoded (buffered) by the policy.
    pub skipped: Vec<usize>,
    pub decode_cost: f64,
}

/// Under [`RxPolicy::SkipOnFirstFailure`], keeps only the first decode of a
/// failed pass; otherwise returns the pass unchanged. The first decode does
/// not depend on the policy, so the truncation equals running the policy.
pub fn apply_rx_adaptation(policy: RxPolicy, run: &SicRun, gamma: f64) -> AdaptedSlot {
    let first_failed = run.outcomes.first().is_some_and(|o| !o.crc_pass);
    if policy == RxPolicy::SkipOnFirstFailure && first_failed {
        let mut skipped: Vec<usize> = run.outcomes[1..].iter().map(|o| o.ue).collect();
        skipped.extend(&run.skipped);
        AdaptedSlot {
            outcomes: run.outcomes[..1].to_vec(),
            skipped,
            decode_cost: gamma,
        }
    } else {
        AdaptedSlot {
            outcomes: run.outcomes.clone(),
            skipped: run.skipped.clone(),
            decode_cost: gamma * run.outcomes.len() as f64,
        }
    }
}
