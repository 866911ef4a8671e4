//! Monte Carlo experiment engine.
//!
//! Every trial (or HARQ episode) draws from its own ChaCha8 substream keyed
//! by `(curve, point, trial)` under the master seed. Trials run in fixed-size
//! batches; early stopping is evaluated between batches, so results do not
//! depend on the number of worker threads.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::harq::{self, BackendSpec, HarqConfig, HarqError, PhyBackendConfig, Protocol};
use crate::pairing::{self, PairingError, RateDemand, WorkflowReport};
use crate::phy::{
    compose_received, draw_channel_with, estimate_channel_with, transmit_symbols, AccessMode, CodeConfig,
    FadingModel, FrameConfig, ModScheme, PhyError, UeTxConfig,
};
use crate::rx::{mmse_decode_all, sic_decode, ChainDecoder, LinkContext, RxError, RxPolicy};
use crate::seqdesign::{self, GenerateOptions, PiKind, SeqError, SignatureFile, SignatureMatrix};

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

const HARQ_STREAM: u64 = 1 << 63;
const PAIRING_STREAM: u64 = 1 << 62;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error(transparent)]
    Phy(#[from] PhyError),
    #[error(transparent)]
    Rx(#[from] RxError),
    #[error(transparent)]
    Harq(#[from] HarqError),
    #[error(transparent)]
    Pairing(#[from] PairingError),
}

impl SimError {
    /// Raised before any trial runs (bad input rather than a runtime fault).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            SimError::Config(_) | SimError::Parse { .. } | SimError::Io { .. } | SimError::Seq(_)
        )
    }
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::Config(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    BlerNoma,
    BlerMuMimo,
    Harq,
    Pairing,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::BlerNoma => "bler_noma",
            Scenario::BlerMuMimo => "bler_mu_mimo",
            Scenario::Harq => "harq",
            Scenario::Pairing => "pairing",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    /// Trials per SNR point (episodes for HARQ, workflow runs for pairing).
    pub trials: usize,
    pub seed: u64,
    pub snr_db: Vec<f64>,
    /// Stop a point once this many block errors (summed over UEs) are seen;
    /// 0 disables early stopping.
    pub early_stop_errors: usize,
    /// Trials per batch; early stopping is checked between batches.
    pub batch: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            trials: 1000,
            seed: 1,
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            early_stop_errors: 200,
            batch: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameSection {
    pub n_prb: usize,
    pub data_symbols: usize,
    pub subcarriers_per_prb: usize,
    pub receive_antennas: usize,
}

impl Default for FrameSection {
    fn default() -> Self {
        Self {
            n_prb: 6,
            data_symbols: 12,
            subcarriers_per_prb: 12,
            receive_antennas: 4,
        }
    }
}

impl FrameSection {
    fn frame(&self, mode: AccessMode) -> FrameConfig {
        FrameConfig {
            n_prb: self.n_prb,
            data_symbols: self.data_symbols,
            subcarriers_per_prb: self.subcarriers_per_prb,
            receive_antennas: self.receive_antennas,
            mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NomaSection {
    /// Spread length `L`.
    pub l: usize,
    pub pi: PiKind,
    /// Seed of the signature generator.
    pub gen_seed: u64,
    pub gen_iters: usize,
    /// Signature JSON file used instead of generating.
    pub signature_file: Option<PathBuf>,
}

impl Default for NomaSection {
    fn default() -> Self {
        Self {
            l: 4,
            pi: PiKind::TotalSquaredCorrelation,
            gen_seed: 1,
            gen_iters: seqdesign::DEFAULT_ITERS,
            signature_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MimoSection {
    /// Group count `G` for the MU-MIMO scenario.
    pub groups: usize,
    /// MU-MIMO group counts swept alongside the main curve.
    pub compare_groups: Vec<usize>,
}

impl Default for MimoSection {
    fn default() -> Self {
        Self {
            groups: 1,
            compare_groups: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Receiver {
    /// Joint MMSE, every UE decoded in parallel.
    Mmse,
    /// MMSE-SIC in descending estimated gain.
    Sic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkSection {
    /// Number of UEs `K`.
    pub users: usize,
    pub modulation: ModScheme,
    pub tbs_bytes: usize,
    pub code: CodeConfig,
    pub fading: FadingModel,
    /// Channel-estimation error variance.
    pub est_error_var: f64,
    pub receiver: Receiver,
}

impl Default for LinkSection {
    fn default() -> Self {
        Self {
            users: 6,
            modulation: ModScheme::Qpsk,
            tbs_bytes: 20,
            code: CodeConfig::default(),
            fading: FadingModel::BlockFlat,
            est_error_var: 0.0,
            receiver: Receiver::Mmse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Abstract,
    Phy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarqSection {
    pub backend: BackendKind,
    /// Protocols run on the same episode seeds as `episode.protocol`.
    pub compare: Vec<Protocol>,
    pub episode: HarqConfig,
}

impl Default for HarqSection {
    fn default() -> Self {
        Self {
            backend: BackendKind::Abstract,
            compare: Vec::new(),
            episode: HarqConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingSection {
    /// CSV with `ue_id,rate,mean_gain`; overrides `demands` when set.
    pub demands_file: Option<PathBuf>,
    pub demands: Vec<RateDemand>,
    pub threshold: f64,
    pub p_max: f64,
}

impl Default for PairingSection {
    fn default() -> Self {
        Self {
            demands_file: None,
            demands: vec![
                RateDemand { ue_id: 0, rate: 2.0, mean_gain: 4.0 },
                RateDemand { ue_id: 1, rate: 1.5, mean_gain: 2.0 },
                RateDemand { ue_id: 2, rate: 1.0, mean_gain: 1.0 },
                RateDemand { ue_id: 3, rate: 0.5, mean_gain: 0.5 },
            ],
            threshold: 0.3,
            p_max: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub sim: SimSection,
    pub frame: FrameSection,
    pub noma: NomaSection,
    pub mimo: MimoSection,
    pub link: LinkSection,
    pub harq: HarqSection,
    pub pairing: PairingSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::BlerNoma,
            sim: SimSection::default(),
            frame: FrameSection::default(),
            noma: NomaSection::default(),
            mimo: MimoSection::default(),
            link: LinkSection::default(),
            harq: HarqSection::default(),
            pairing: PairingSection::default(),
        }
    }
}

fn collect_keys(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                collect_keys(&key, child, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Every dotted key accepted by the config file and by overrides.
pub fn config_keys() -> Vec<String> {
    let v = serde_json::to_value(ExperimentConfig::default()).expect("config serializes");
    let mut out = Vec::new();
    collect_keys("", &v, &mut out);
    out
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(n) if n.is_f64() => "number",
        Value::Number(_) => "integer",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn compatible(old: &Value, new: &Value) -> bool {
    match (old, new) {
        (Value::Null, _) | (_, Value::Null) => true,
        (Value::Number(o), Value::Number(n)) => !(o.is_u64() && !n.is_u64()) && !(o.is_i64() && n.is_f64()),
        // enums may switch between unit and data variants
        (Value::String(_), Value::Object(_)) | (Value::Object(_), Value::String(_)) => true,
        (o, n) => json_kind(o) == json_kind(n) || (o.is_number() && n.is_number()),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io { path: path.into(), source })?;
        Self::from_json(&text).map_err(|e| SimError::Parse { path: path.into(), msg: e.to_string() })
    }

    /// Applies `key=value` overrides; the value is parsed as JSON, falling
    /// back to a bare string, and must match the type already at `key`.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, SimError> {
        let mut root = serde_json::to_value(self).expect("config serializes");
        for ov in overrides {
            let ov = ov.as_ref();
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| invalid(format!("override '{ov}' is not key=value")))?;
            let key = key.trim();
            let new: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().into()));
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| invalid(format!("unknown config key '{key}'")))?;
            }
            if !compatible(slot, &new) {
                return Err(invalid(format!(
                    "override '{key}' expects {}, got {}",
                    json_kind(slot),
                    json_kind(&new)
                )));
            }
            *slot = new;
        }
        serde_json::from_value(root).map_err(|e| invalid(format!("override rejected: {e}")))
    }

    fn phy_users(&self) -> usize {
        self.link.users
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let s = &self.sim;
        if s.trials == 0 {
            return Err(invalid("sim.trials must be >= 1"));
        }
        if s.batch == 0 {
            return Err(invalid("sim.batch must be >= 1"));
        }
        if matches!(self.scenario, Scenario::BlerNoma | Scenario::BlerMuMimo) {
            if s.snr_db.is_empty() || s.snr_db.iter().any(|x| !x.is_finite()) {
                return Err(invalid("sim.snr_db must be a non-empty list of finite values"));
            }
            if !(self.link.est_error_var >= 0.0 && self.link.est_error_var.is_finite()) {
                return Err(invalid("link.est_error_var must be >= 0"));
            }
            let k = self.phy_users();
            if k == 0 {
                return Err(invalid("link.users must be >= 1"));
            }
            for (label, frame) in self.bler_frames_unchecked()? {
                let ues = self.ue_configs(&frame, 1.0);
                frame.check_ues(&ues).map_err(|e| invalid(format!("{label}: {e}")))?;
                for u in &ues {
                    let lay = frame.layout(u.signature)?;
                    let have = u.coded_bits(&lay);
                    let need = u.code.min_target_bits(u.info_bits());
                    if have < need {
                        return Err(invalid(format!(
                            "{label}: {have} coded bits per UE cannot carry {need} (TBS {} bytes)",
                            u.tbs_bytes
                        )));
                    }
                }
            }
        }
        if self.scenario == Scenario::Harq {
            self.harq.episode.validate()?;
            for &p in &self.harq.compare {
                HarqConfig { protocol: p, ..self.harq.episode.clone() }.validate()?;
            }
        }
        if self.scenario == Scenario::Pairing {
            let p = &self.pairing;
            if !(0.0..=1.0).contains(&p.threshold) || !(p.p_max > 0.0 && p.p_max.is_finite()) {
                return Err(invalid("pairing.threshold must be in [0, 1] and pairing.p_max > 0"));
            }
            if p.demands_file.is_none() && p.demands.len() < 2 {
                return Err(invalid("pairing needs at least 2 demands"));
            }
        }
        Ok(())
    }

    fn signatures(&self, k: usize) -> Result<SignatureMatrix, SimError> {
        let n = &self.noma;
        if let Some(path) = &n.signature_file {
            let text = std::fs::read_to_string(path).map_err(|source| SimError::Io { path: path.clone(), source })?;
            let file = SignatureFile::from_json(&text).map_err(|e| SimError::Parse { path: path.clone(), msg: e.to_string() })?;
            let s = file.to_matrix()?;
            if s.user_count() != k || s.spread_length() != n.l {
                return Err(invalid(format!(
                    "signature file is {}x{}, config needs L={} K={k}",
                    s.spread_length(),
                    s.user_count(),
                    n.l
                )));
            }
            return Ok(s);
        }
        if n.l == 0 {
            return Err(invalid("noma.l must be >= 1"));
        }
        let opts = GenerateOptions { seed: n.gen_seed, iters: n.gen_iters, ..GenerateOptions::default() };
        Ok(seqdesign::generate(k, n.l, n.pi, opts)?.matrix)
    }

    fn mimo_frame(&self, groups: usize) -> Result<FrameConfig, SimError> {
        let k = self.phy_users();
        if groups == 0 || k % groups != 0 {
            return Err(invalid(format!("MU-MIMO needs K = G * N_u; K={k} is not divisible by G={groups}")));
        }
        Ok(self.frame.frame(AccessMode::MuMimo { groups, users_per_group: k / groups }))
    }

    fn bler_frames_unchecked(&self) -> Result<Vec<(String, FrameConfig)>, SimError> {
        let mut out = Vec::new();
        match self.scenario {
            Scenario::BlerNoma => {
                let sig = self.signatures(self.phy_users())?;
                out.push(("noma".to_string(), self.frame.frame(AccessMode::NomaWsma { signatures: sig })));
            }
            Scenario::BlerMuMimo => {
                out.push((format!("mu_mimo_g{}", self.mimo.groups), self.mimo_frame(self.mimo.groups)?));
            }
            _ => return Ok(out),
        }
        for &g in &self.mimo.compare_groups {
            let label = format!("mu_mimo_g{g}");
            if out.iter().all(|(l, _)| *l != label) {
                out.push((label, self.mimo_frame(g)?));
            }
        }
        Ok(out)
    }

    fn ue_configs(&self, frame: &FrameConfig, power: f64) -> Vec<UeTxConfig> {
        (0..self.phy_users().min(frame.user_capacity()))
            .map(|k| UeTxConfig {
                power,
                signature: k,
                modulation: self.link.modulation,
                tbs_bytes: self.link.tbs_bytes,
                code: self.link.code,
            })
            .collect()
    }
}

/// Options that do not change results.
#[derive(Debug, Default)]
pub struct RunOptions {
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
    /// Set asynchronously to stop after the current batch.
    pub cancel: Option<std::sync::Arc<AtomicBool>>,
}

impl RunOptions {
    fn cancelled(&self) -> bool {
        self.cancel.as_ref().is_some_and(|c| c.load(Ordering::Relaxed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeBler {
    pub ue: usize,
    pub errors: usize,
    pub bler: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlerPoint {
    pub snr_db: f64,
    pub trials: usize,
    pub ues: Vec<UeBler>,
}

impl BlerPoint {
    pub fn mean_bler(&self) -> f64 {
        if self.ues.is_empty() {
            return 0.0;
        }
        self.ues.iter().map(|u| u.bler).sum::<f64>() / self.ues.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub label: String,
    pub points: Vec<BlerPoint>,
}

/// Sample mean with a normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl Stat {
    pub fn from_samples(x: &[f64]) -> Self {
        let n = x.len();
        if n == 0 {
            return Self { mean: 0.0, se: 0.0, ci_lo: 0.0, ci_hi: 0.0 };
        }
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let se = (var / n as f64).sqrt();
        Self { mean, se, ci_lo: mean - Z95 * se, ci_hi: mean + Z95 * se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarqSummary {
    pub protocol: Protocol,
    pub episodes: usize,
    pub retransmissions: Vec<Stat>,
    pub delay_slots: Stat,
    pub decode_cost: Stat,
    pub throughput: Vec<Stat>,
    pub total_throughput: Stat,
    pub fairness: Stat,
    pub degraded_episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingSummary {
    /// Workflow run on the first seed.
    pub report: WorkflowReport,
    pub runs: usize,
    pub csi_acquisitions: Stat,
    pub paired: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub version: String,
    pub scenario: Scenario,
    pub config: ExperimentConfig,
    #[serde(default)]
    pub curves: Vec<Curve>,
    #[serde(default)]
    pub harq: Vec<HarqSummary>,
    #[serde(default)]
    pub pairing: Option<PairingSummary>,
    /// Interrupted before every trial ran.
    #[serde(default)]
    pub truncated: bool,
    /// Left out of saved files so they stay byte-identical across runs.
    #[serde(skip)]
    pub wall_clock_s: Option<f64>,
}

impl ResultSet {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            scenario: cfg.scenario,
            config: cfg.clone(),
            curves: Vec::new(),
            harq: Vec::new(),
            pairing: None,
            truncated: false,
            wall_clock_s: None,
        }
    }

    pub fn curve(&self, label: &str) -> Option<&Curve> {
        self.curves.iter().find(|c| c.label == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Wilson score interval at 95%.
pub fn wilson_interval(errors: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = errors as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Substream for trial `trial` of point `point` on curve `curve`.
pub fn trial_rng(seed: u64, curve: u64, point: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((curve << 48) | (point << 32) | trial);
    rng
}

fn bler_trial(
    cfg: &ExperimentConfig,
    frame: &FrameConfig,
    ues: &[UeTxConfig],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<bool>, SimError> {
    let ch = draw_channel_with(frame, cfg.link.fading, rng);
    let ch = estimate_channel_with(&ch, cfg.link.est_error_var, rng);
    let tbs: Vec<Vec<u8>> = ues
        .iter()
        .map(|u| (0..u.info_bits()).map(|_| rng.random_range(0..2u8)).collect())
        .collect();
    let syms = ues
        .iter()
        .zip(&tbs)
        .map(|(u, tb)| transmit_symbols(tb, u, &frame.layout(u.signature)?))
        .collect::<Result<Vec<_>, _>>()?;
    let y = compose_received(frame, ues, &syms, &ch, 1.0, rng)?;
    let ctx = LinkContext::new(frame, ues, &ch, 1.0)?;
    let mut dec = ChainDecoder { ues };
    let outcomes = match cfg.link.receiver {
        Receiver::Mmse => mmse_decode_all(&ctx, &y, &mut dec)?,
        Receiver::Sic => sic_decode(&ctx, &y, &ctx.default_order(), &mut dec, RxPolicy::FullSic, 0.0)?.outcomes,
    };
    let mut errors = vec![true; ues.len()];
    for o in outcomes {
        errors[o.ue] = !(o.crc_pass && o.bits == tbs[o.ue]);
    }
    Ok(errors)
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool")
        .install(f)
}

/// NOMA and/or MU-MIMO BLER curves over the SNR grid (SNR = p / sigma^2,
/// unit noise).
pub fn run_bler_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ResultSet, SimError> {
    cfg.validate()?;
    let frames = cfg.bler_frames_unchecked()?;
    if frames.is_empty() {
        return Err(invalid(format!("scenario {} is not a BLER sweep", cfg.scenario)));
    }
    let start = std::time::Instant::now();
    let mut out = ResultSet::new(cfg);
    with_pool(opts.workers, || -> Result<(), SimError> {
        'curves: for (ci, (label, frame)) in frames.iter().enumerate() {
            let mut curve = Curve { label: label.clone(), points: Vec::new() };
            for (pi, &snr) in cfg.sim.snr_db.iter().enumerate() {
                let ues = cfg.ue_configs(frame, 10f64.powf(snr / 10.0));
                let mut errors = vec![0usize; ues.len()];
                let mut done = 0;
                while done < cfg.sim.trials {
                    if opts.cancelled() {
                        out.truncated = true;
                        if done > 0 {
                            curve.points.push(point(snr, done, &errors));
                        }
                        out.curves.push(curve);
                        break 'curves;
                    }
                    let end = (done + cfg.sim.batch).min(cfg.sim.trials);
                    let batch: Vec<Vec<bool>> = (done..end)
                        .into_par_iter()
                        .map(|t| {
                            let mut rng = trial_rng(cfg.sim.seed, ci as u64, pi as u64, t as u64);
                            bler_trial(cfg, frame, &ues, &mut rng)
                        })
                        .collect::<Result<_, _>>()?;
                    for trial in batch {
                        for (e, hit) in errors.iter_mut().zip(trial) {
                            *e += usize::from(hit);
                        }
                    }
                    done = end;
                    let total: usize = errors.iter().sum();
                    if cfg.sim.early_stop_errors > 0 && total >= cfg.sim.early_stop_errors {
                        break;
                    }
                }
                let p = point(snr, done, &errors);
                log::info!("{label} {snr} dB: {} trials, mean BLER {:.3e}", done, p.mean_bler());
                curve.points.push(p);
            }
            out.curves.push(curve);
        }
        Ok(())
    })?;
    out.wall_clock_s = Some(start.elapsed().as_secs_f64());
    Ok(out)
}

fn point(snr_db: f64, trials: usize, errors: &[usize]) -> BlerPoint {
    BlerPoint {
        snr_db,
        trials,
        ues: errors
            .iter()
            .enumerate()
            .map(|(ue, &e)| {
                let (ci_lo, ci_hi) = wilson_interval(e, trials);
                UeBler { ue, errors: e, bler: e as f64 / trials as f64, ci_lo, ci_hi }
            })
            .collect(),
    }
}

/// Seed of HARQ episode `episode`; shared by every compared protocol.
pub fn episode_seed(master: u64, episode: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(HARQ_STREAM | episode);
    rng.random()
}

fn harq_backend(cfg: &ExperimentConfig) -> Result<BackendSpec, SimError> {
    Ok(match cfg.harq.backend {
        BackendKind::Abstract => BackendSpec::Abstract,
        BackendKind::Phy => {
            let k = cfg.harq.episode.ues.len().max(2);
            let sig = cfg.signatures(k)?;
            BackendSpec::Phy(PhyBackendConfig {
                frame: cfg.frame.frame(AccessMode::NomaWsma { signatures: sig }),
                modulation: cfg.link.modulation,
                tbs_bytes: cfg.link.tbs_bytes,
                code: cfg.link.code,
            })
        }
    })
}

fn summarize(protocol: Protocol, metrics: &[harq::HarqMetrics], n_ue: usize) -> HarqSummary {
    let col = |f: &dyn Fn(&harq::HarqMetrics) -> f64| -> Stat {
        Stat::from_samples(&metrics.iter().map(f).collect::<Vec<_>>())
    };
    HarqSummary {
        protocol,
        episodes: metrics.len(),
        retransmissions: (0..n_ue).map(|u| col(&|m| m.retransmissions[u])).collect(),
        delay_slots: col(&|m| m.delay_slots),
        decode_cost: col(&|m| m.decode_cost),
        throughput: (0..n_ue).map(|u| col(&|m| m.throughput[u])).collect(),
        total_throughput: col(&|m| m.total_throughput),
        fairness: col(&|m| m.fairness),
        degraded_episodes: metrics.iter().filter(|m| m.degraded).count(),
    }
}

/// `sim.trials` episodes of the configured protocol (and of each compared
/// protocol on the same seeds).
pub fn run_harq_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ResultSet, SimError> {
    cfg.validate()?;
    let backend = harq_backend(cfg)?;
    let start = std::time::Instant::now();
    let mut out = ResultSet::new(cfg);
    let mut protocols = vec![cfg.harq.episode.protocol];
    protocols.extend(cfg.harq.compare.iter().copied().filter(|p| *p != cfg.harq.episode.protocol));
    with_pool(opts.workers, || -> Result<(), SimError> {
        for protocol in protocols {
            let ep = HarqConfig { protocol, ..cfg.harq.episode.clone() };
            let mut metrics = Vec::with_capacity(cfg.sim.trials);
            let mut done = 0;
            while done < cfg.sim.trials {
                if opts.cancelled() {
                    out.truncated = true;
                    break;
                }
                let end = (done + cfg.sim.batch).min(cfg.sim.trials);
                let batch: Vec<harq::HarqMetrics> = (done..end)
                    .into_par_iter()
                    .map(|e| Ok(harq::run_episode(&ep, &backend, episode_seed(cfg.sim.seed, e as u64))?.metrics))
                    .collect::<Result<_, HarqError>>()?;
                metrics.extend(batch);
                done = end;
            }
            let s = summarize(protocol, &metrics, ep.ues.len());
            log::info!("{protocol}: {} episodes, retransmissions {:?}", s.episodes, s.retransmissions.iter().map(|r| r.mean).collect::<Vec<_>>());
            out.harq.push(s);
            if out.truncated {
                break;
            }
        }
        Ok(())
    })?;
    out.wall_clock_s = Some(start.elapsed().as_secs_f64());
    Ok(out)
}

fn pairing_demands(cfg: &ExperimentConfig) -> Result<Vec<RateDemand>, SimError> {
    match &cfg.pairing.demands_file {
        Some(path) => pairing::read_demands(path).map_err(|e| match e {
            PairingError::Io(source) => SimError::Io { path: path.clone(), source },
            other => SimError::Parse { path: path.clone(), msg: other.to_string() },
        }),
        None => Ok(cfg.pairing.demands.clone()),
    }
}

/// Runs the pairing workflow `sim.trials` times on independent gain draws.
pub fn run_pairing_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ResultSet, SimError> {
    cfg.validate()?;
    let demands = pairing_demands(cfg)?;
    let start = std::time::Instant::now();
    let mut out = ResultSet::new(cfg);
    let p = &cfg.pairing;
    let seed_of = |run: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.sim.seed);
        rng.set_stream(PAIRING_STREAM | run);
        rng.random::<u64>()
    };
    let reports: Vec<WorkflowReport> = with_pool(opts.workers, || {
        (0..cfg.sim.trials as u64)
            .into_par_iter()
            .map(|r| pairing::run_pairing_workflow(&demands, p.threshold, p.p_max, seed_of(r)))
            .collect::<Result<_, _>>()
    })?;
    let first = &reports[0];
    out.pairing = Some(PairingSummary {
        report: first.clone(),
        runs: reports.len(),
        csi_acquisitions: Stat::from_samples(&reports.iter().map(|r| r.csi_acquisitions as f64).collect::<Vec<_>>()),
        paired: Stat::from_samples(
            &reports
                .iter()
                .map(|r| r.decisions.iter().filter(|d| d.paired).count() as f64)
                .collect::<Vec<_>>(),
        ),
    });
    out.wall_clock_s = Some(start.elapsed().as_secs_f64());
    Ok(out)
}

/// Dispatches on `cfg.scenario`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ResultSet, SimError> {
    match cfg.scenario {
        Scenario::BlerNoma | Scenario::BlerMuMimo => run_bler_sweep(cfg, opts),
        Scenario::Harq => run_harq_experiment(cfg, opts),
        Scenario::Pairing => run_pairing_experiment(cfg, opts),
    }
}

/// One CSV row per (curve, SNR, UE).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub scenario: String,
    pub snr_db: f64,
    pub ue: usize,
    pub trials: usize,
    pub errors: usize,
    pub bler: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

pub fn csv_rows(results: &ResultSet) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    for c in &results.curves {
        for p in &c.points {
            for u in &p.ues {
                rows.push(CsvRow {
                    scenario: c.label.clone(),
                    snr_db: p.snr_db,
                    ue: u.ue,
                    trials: p.trials,
                    errors: u.errors,
                    bler: u.bler,
                    ci_lo: u.ci_lo,
                    ci_hi: u.ci_hi,
                });
            }
        }
    }
    rows
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io { path: path.to_path_buf(), source }
}

pub fn write_csv(results: &ResultSet, path: &Path) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SimError::Parse { path: path.into(), msg: e.to_string() })?;
    for row in csv_rows(results) {
        w.serialize(row).map_err(|e| SimError::Parse { path: path.into(), msg: e.to_string() })?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>, SimError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| SimError::Parse { path: path.into(), msg: e.to_string() })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                SimError::Parse { path: path.into(), msg: format!("line {line}: {e}") }
            })
        })
        .collect()
}

/// Writes `<out>.json` (full fidelity) and, for BLER sweeps, `<out>.csv`.
pub fn persist(results: &ResultSet, out: &Path) -> Result<Vec<PathBuf>, SimError> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let json = out.with_extension("json");
    std::fs::write(&json, results.to_json() + "\n").map_err(io_err(&json))?;
    let mut written = vec![json];
    if !results.curves.is_empty() {
        let csv = out.with_extension("csv");
        write_csv(results, &csv)?;
        written.push(csv);
    }
    Ok(written)
}

pub fn load(path: &Path) -> Result<ResultSet, SimError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    ResultSet::from_json(&text).map_err(|e| SimError::Parse { path: path.into(), msg: e.to_string() })
}
