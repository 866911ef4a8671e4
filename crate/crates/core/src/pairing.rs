//! Rate-based UE pairing without instantaneous CSI.
//!
//! Candidate pairs are formed from the rate ranking, screened by the outage
//! probability of the two-UE SIC constraints under exponential power gains,
//! and only admitted pairs trigger a (simulated) CSI acquisition followed by
//! minimal power allocation.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PairingError {
    #[error("invalid pairing input: {0}")]
    Invalid(String),
    #[error("demands line {line}: {msg}")]
    Csv { line: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateDemand {
    pub ue_id: u32,
    /// Bits per symbol.
    pub rate: f64,
    /// Mean of the exponential power gain.
    pub mean_gain: f64,
}

impl RateDemand {
    pub fn threshold(&self) -> f64 {
        self.rate.exp2() - 1.0
    }

    fn validate(&self) -> Result<(), PairingError> {
        if !(self.rate > 0.0 && self.rate.is_finite() && self.mean_gain > 0.0 && self.mean_gain.is_finite()) {
            return Err(PairingError::Invalid(format!(
                "UE {} needs a positive finite rate and mean gain",
                self.ue_id
            )));
        }
        Ok(())
    }
}

fn check_finite(values: &[f64]) -> Result<(), PairingError> {
    if values.iter().all(|v| v.is_finite() && *v >= 0.0) {
        Ok(())
    } else {
        Err(PairingError::Invalid(format!("inputs must be finite and non-negative: {values:?}")))
    }
}

/// `P[g_a p_a >= theta_a (g_b p_b + 1), g_b p_b >= theta_b]` for independent
/// exponential gains; `a` is decoded first.
pub fn success_probability_with_powers(
    a: &RateDemand,
    b: &RateDemand,
    p_a: f64,
    p_b: f64,
) -> Result<f64, PairingError> {
    check_finite(&[a.rate, b.rate, a.mean_gain, b.mean_gain, p_a, p_b])?;
    let (ta, tb) = (a.threshold(), b.threshold());
    let (mu_a, mu_b) = (a.mean_gain * p_a, b.mean_gain * p_b);
    if mu_a == 0.0 && ta > 0.0 {
        return Ok(0.0);
    }
    if mu_b == 0.0 {
        if tb > 0.0 {
            return Ok(0.0);
        }
        return Ok(if ta == 0.0 { 1.0 } else { (-ta / mu_a).exp() });
    }
    if ta == 0.0 {
        return Ok((-tb / mu_b).exp());
    }
    let exponent = -ta / mu_a - tb / mu_b - ta * tb / mu_a;
    Ok(exponent.exp() / (1.0 + mu_b * ta / mu_a))
}

/// [`success_probability_with_powers`] with both UEs at the power budget.
pub fn success_probability(a: &RateDemand, b: &RateDemand, budget: f64) -> Result<f64, PairingError> {
    success_probability_with_powers(a, b, budget, budget)
}

/// Direct sampling of the two-constraint event; returns `(estimate, std error)`.
pub fn success_probability_mc<R: Rng + ?Sized>(
    a: &RateDemand,
    b: &RateDemand,
    p_a: f64,
    p_b: f64,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, f64), PairingError> {
    check_finite(&[a.rate, b.rate, a.mean_gain, b.mean_gain, p_a, p_b])?;
    if samples == 0 || a.mean_gain == 0.0 || b.mean_gain == 0.0 {
        return Err(PairingError::Invalid("sampling needs samples > 0 and positive mean gains".into()));
    }
    let ea = Exp::new(1.0 / a.mean_gain).expect("positive mean");
    let eb = Exp::new(1.0 / b.mean_gain).expect("positive mean");
    let (ta, tb) = (a.threshold(), b.threshold());
    let hits = (0..samples)
        .filter(|_| {
            let ga: f64 = ea.sample(rng);
            let gb: f64 = eb.sample(rng);
            ga * p_a >= ta * (gb * p_b + 1.0) && gb * p_b >= tb
        })
        .count();
    let p = hits as f64 / samples as f64;
    Ok((p, (p * (1.0 - p) / samples as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatePairing {
    /// `(higher rate, lower rate)` pairs.
    pub pairs: Vec<(RateDemand, RateDemand)>,
    /// Median UE left over when N is odd.
    pub unpaired: Option<RateDemand>,
}

/// Sorts by rate (descending, ties by UE id) and pairs the ends inward.
pub fn pair_by_rates(demands: &[RateDemand]) -> Result<RatePairing, PairingError> {
    if demands.len() < 2 {
        return Err(PairingError::Invalid(format!("need at least 2 demands, got {}", demands.len())));
    }
    let mut sorted = demands.to_vec();
    sorted.sort_by(|x, y| y.rate.total_cmp(&x.rate).then(x.ue_id.cmp(&y.ue_id)));
    let mut ids: Vec<u32> = sorted.iter().map(|d| d.ue_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(PairingError::Invalid("duplicate UE ids".into()));
    }
    let n = sorted.len();
    let pairs = (0..n / 2).map(|i| (sorted[i], sorted[n - 1 - i])).collect();
    let unpaired = (n % 2 == 1).then(|| sorted[n / 2]);
    Ok(RatePairing { pairs, unpaired })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerAllocation {
    Feasible { p_strong: f64, p_weak: f64 },
    Infeasible,
}

/// Minimal powers meeting both SIC rate constraints with the strong UE
/// decoded first; infeasible when either exceeds `p_max`.
pub fn allocate_powers(g_strong: f64, g_weak: f64, r_strong: f64, r_weak: f64, p_max: f64) -> PowerAllocation {
    let (ts, tw) = (r_strong.exp2() - 1.0, r_weak.exp2() - 1.0);
    let p_weak = if tw == 0.0 { 0.0 } else { tw / g_weak };
    let p_strong = if ts == 0.0 { 0.0 } else { ts * (g_weak * p_weak + 1.0) / g_strong };
    if p_weak.is_finite() && p_strong.is_finite() && p_weak <= p_max && p_strong <= p_max {
        PowerAllocation::Feasible { p_strong, p_weak }
    } else {
        PowerAllocation::Infeasible
    }
}

/// Source of "pilot" power-gain measurements.
pub trait GainSource {
    fn measure(&mut self, demand: &RateDemand) -> f64;
}

/// Exponential gains with each UE's mean, from a seeded stream.
pub struct RayleighGains {
    rng: ChaCha8Rng,
}

impl RayleighGains {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl GainSource for RayleighGains {
    fn measure(&mut self, demand: &RateDemand) -> f64 {
        Exp::new(1.0 / demand.mean_gain).expect("positive mean").sample(&mut self.rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDecision {
    /// Decoded first (larger mean gain before CSI, larger measured gain after).
    pub strong: u32,
    pub weak: u32,
    pub probability: f64,
    pub admitted: bool,
    pub gains: Option<(f64, f64)>,
    pub powers: Option<(f64, f64)>,
    /// Admitted and jointly rate-feasible within the power budget.
    pub paired: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowReport {
    pub decisions: Vec<PairDecision>,
    pub unpaired: Option<u32>,
    pub candidate_pairs: usize,
    pub csi_acquisitions: usize,
    pub log: Vec<String>,
}

fn strong_first(x: RateDemand, y: RateDemand, gx: f64, gy: f64) -> (RateDemand, RateDemand, f64, f64) {
    if gx > gy || (gx == gy && x.ue_id <= y.ue_id) {
        (x, y, gx, gy)
    } else {
        (y, x, gy, gx)
    }
}

/// Collect demands, screen pairs by probability, acquire CSI for admitted
/// pairs only, allocate powers, signal timing.
pub fn run_pairing_workflow_with<G: GainSource>(
    demands: &[RateDemand],
    threshold: f64,
    p_max: f64,
    gains: &mut G,
) -> Result<WorkflowReport, PairingError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(PairingError::Invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    if !(p_max > 0.0 && p_max.is_finite()) {
        return Err(PairingError::Invalid(format!("power budget {p_max}")));
    }
    let mut log = Vec::new();
    for d in demands {
        d.validate()?;
    }
    log.push(format!("step 1: collected {} rate demands", demands.len()));
    let ranking = pair_by_rates(demands)?;
    let mut decisions = Vec::with_capacity(ranking.pairs.len());
    let mut csi = 0;
    for &(x, y) in &ranking.pairs {
        let (s, w, _, _) = strong_first(x, y, x.mean_gain, y.mean_gain);
        let probability = success_probability(&s, &w, p_max)?;
        let admitted = probability >= threshold;
        log.push(format!(
            "step 2: pair ({}, {}) success probability {probability:.6}{}",
            s.ue_id,
            w.ue_id,
            if admitted { "" } else { ", screened out" }
        ));
        let mut d = PairDecision {
            strong: s.ue_id,
            weak: w.ue_id,
            probability,
            admitted,
            gains: None,
            powers: None,
            paired: false,
        };
        if admitted {
            csi += 1;
            let (gs, gw) = (gains.measure(&s), gains.measure(&w));
            let (s2, w2, gs, gw) = strong_first(s, w, gs, gw);
            log.push(format!("step 3: measured gains {}: {gs:.6}, {}: {gw:.6}", s2.ue_id, w2.ue_id));
            d.strong = s2.ue_id;
            d.weak = w2.ue_id;
            d.gains = Some((gs, gw));
            if let PowerAllocation::Feasible { p_strong, p_weak } = allocate_powers(gs, gw, s2.rate, w2.rate, p_max) {
                d.powers = Some((p_strong, p_weak));
                d.paired = true;
            }
            log.push(format!(
                "step 4: pair ({}, {}) {}",
                d.strong,
                d.weak,
                if d.paired { "confirmed" } else { "infeasible within budget" }
            ));
        }
        decisions.push(d);
    }
    log.push("step 5: timing synchronization signalled to paired UEs".into());
    Ok(WorkflowReport {
        candidate_pairs: decisions.len(),
        decisions,
        unpaired: ranking.unpaired.map(|d| d.ue_id),
        csi_acquisitions: csi,
        log,
    })
}

pub fn run_pairing_workflow(
    demands: &[RateDemand],
    threshold: f64,
    p_max: f64,
    seed: u64,
) -> Result<WorkflowReport, PairingError> {
    run_pairing_workflow_with(demands, threshold, p_max, &mut RayleighGains::new(seed))
}

/// Parses `ue_id,rate,mean_gain` rows with a header.
pub fn parse_demands<R: Read>(reader: R) -> Result<Vec<RateDemand>, PairingError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<RateDemand>() {
        match row {
            Ok(d) => {
                d.validate().map_err(|e| PairingError::Csv {
                    line: out.len() as u64 + 2,
                    msg: e.to_string(),
                })?;
                out.push(d)
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                return Err(PairingError::Csv { line, msg: e.to_string() });
            }
        }
    }
    Ok(out)
}

pub fn read_demands(path: &Path) -> Result<Vec<RateDemand>, PairingError> {
    parse_demands(std::fs::File::open(path)?)
}
