//! Transmitter chain, fading channel and composite received signal.
//!
//! Each UE's transport block is CRC-protected, encoded, rate-adapted to its
//! resource allocation, QAM-modulated and either spread over `L` consecutive
//! REs by its signature (WSMA) or mapped one symbol per RE inside its group's
//! RE chunk (MU-MIMO). Per receive antenna and RE the base station observes
//!
//! ```text
//! y = sum_k h_k * s_k * sqrt(p_k) * q_k + z
//! ```

pub mod channel;
pub mod coding;
pub mod modulation;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seqdesign::SignatureMatrix;

pub use channel::{
    complex_gaussian, draw_channel, draw_channel_with, estimate_channel, estimate_channel_with,
    ChannelRealization, FadingModel,
};
pub use coding::{decode, encode, CodeConfig, CodeKind, Decoded};
pub use modulation::{demap_llr, modulate, ModScheme};

#[derive(Debug, Error, PartialEq)]
pub enum PhyError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("coded-bit budget {target} is below the {required} bits the code needs")]
    TargetTooSmall { target: usize, required: usize },
    #[error("{ues} UEs exceed the frame capacity K={capacity}")]
    TooManyUes { ues: usize, capacity: usize },
}

/// How UEs share the RE grid.
#[derive(Debug, Clone, PartialEq)]
pub enum AccessMode {
    /// All UEs share every RE, separated by their signatures.
    NomaWsma { signatures: SignatureMatrix },
    /// `groups` disjoint RE chunks, each shared spatially by
    /// `users_per_group` UEs.
    MuMimo { groups: usize, users_per_group: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameConfig {
    pub n_prb: usize,
    pub data_symbols: usize,
    pub subcarriers_per_prb: usize,
    pub receive_antennas: usize,
    pub mode: AccessMode,
}

impl FrameConfig {
    /// Six PRBs, twelve data symbols, four receive antennas.
    pub fn new(mode: AccessMode) -> Self {
        Self {
            n_prb: 6,
            data_symbols: 12,
            subcarriers_per_prb: 12,
            receive_antennas: 4,
            mode,
        }
    }

    pub fn re_count(&self) -> usize {
        self.n_prb * self.subcarriers_per_prb * self.data_symbols
    }

    /// Number of UE slots `K` the frame supports.
    pub fn user_capacity(&self) -> usize {
        match &self.mode {
            AccessMode::NomaWsma { signatures } => signatures.user_count(),
            AccessMode::MuMimo { groups, users_per_group } => groups * users_per_group,
        }
    }

    /// Spreading length; 1 for MU-MIMO.
    pub fn spread_length(&self) -> usize {
        match &self.mode {
            AccessMode::NomaWsma { signatures } => signatures.spread_length(),
            AccessMode::MuMimo { .. } => 1,
        }
    }

    pub fn validate(&self) -> Result<(), PhyError> {
        if self.re_count() == 0 || self.receive_antennas == 0 {
            return Err(PhyError::InvalidConfig(
                "frame needs at least one RE and one receive antenna".into(),
            ));
        }
        match &self.mode {
            AccessMode::NomaWsma { signatures } => {
                if self.re_count() % signatures.spread_length() != 0 {
                    return Err(PhyError::InvalidConfig(format!(
                        "RE grid of {} is not divisible by spread length {}",
                        self.re_count(),
                        signatures.spread_length()
                    )));
                }
            }
            AccessMode::MuMimo { groups, users_per_group } => {
                if *groups == 0 || *users_per_group == 0 {
                    return Err(PhyError::InvalidConfig("G and N_u must be positive".into()));
                }
                if self.re_count() % groups != 0 {
                    return Err(PhyError::InvalidConfig(format!(
                        "RE grid of {} cannot be split into {groups} equal groups",
                        self.re_count()
                    )));
                }
            }
        }
        Ok(())
    }

    /// REs and spreading weights used by the UE holding `signature`.
    pub fn layout(&self, signature: usize) -> Result<Layout, PhyError> {
        let capacity = self.user_capacity();
        if signature >= capacity {
            return Err(PhyError::InvalidConfig(format!(
                "signature index {signature} out of range (K={capacity})"
            )));
        }
        Ok(match &self.mode {
            AccessMode::NomaWsma { signatures } => Layout {
                start: 0,
                len: self.re_count(),
                group: 0,
                spread: signatures.column(signature),
            },
            AccessMode::MuMimo { groups, users_per_group } => {
                let len = self.re_count() / groups;
                let group = signature / users_per_group;
                Layout {
                    start: group * len,
                    len,
                    group,
                    spread: vec![Complex64::new(1.0, 0.0)],
                }
            }
        })
    }

    pub fn check_ues(&self, ues: &[UeTxConfig]) -> Result<(), PhyError> {
        self.validate()?;
        if ues.len() > self.user_capacity() {
            return Err(PhyError::TooManyUes {
                ues: ues.len(),
                capacity: self.user_capacity(),
            });
        }
        for ue in ues {
            ue.validate()?;
            self.layout(ue.signature)?;
        }
        Ok(())
    }
}

/// Contiguous RE allocation of one UE and its spreading weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub start: usize,
    pub len: usize,
    /// RE chunk index; 0 in NOMA mode.
    pub group: usize,
    pub spread: Vec<Complex64>,
}

impl Layout {
    pub fn symbols(&self) -> usize {
        self.len / self.spread.len()
    }

    pub fn spread_length(&self) -> usize {
        self.spread.len()
    }

    /// RE carrying chip `chip` of symbol `sym`.
    pub fn re(&self, sym: usize, chip: usize) -> usize {
        self.start + sym * self.spread.len() + chip
    }

    pub fn res(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeTxConfig {
    /// Linear transmit power per symbol.
    pub power: f64,
    /// Signature column (NOMA) or spatial slot `group * N_u + index` (MU-MIMO).
    pub signature: usize,
    pub modulation: ModScheme,
    pub tbs_bytes: usize,
    pub code: CodeConfig,
}

impl UeTxConfig {
    pub fn info_bits(&self) -> usize {
        8 * self.tbs_bytes
    }

    pub fn validate(&self) -> Result<(), PhyError> {
        if !(self.power >= 0.0 && self.power.is_finite()) {
            return Err(PhyError::InvalidConfig(format!(
                "power must be finite and >= 0, got {}",
                self.power
            )));
        }
        if self.tbs_bytes == 0 {
            return Err(PhyError::InvalidConfig("tbs_bytes must be positive".into()));
        }
        self.code.validate()
    }

    /// Coded-bit budget for this UE in the given layout.
    pub fn coded_bits(&self, layout: &Layout) -> usize {
        layout.symbols() * self.modulation.bits_per_symbol()
    }
}

/// `q * s`.
pub fn spread(q: Complex64, signature: &[Complex64]) -> Vec<Complex64> {
    signature.iter().map(|s| q * s).collect()
}

/// Encodes and modulates `tb` to fill the UE's layout.
pub fn transmit_symbols(
    tb: &[u8],
    ue: &UeTxConfig,
    layout: &Layout,
) -> Result<Vec<Complex64>, PhyError> {
    if tb.len() != ue.info_bits() {
        return Err(PhyError::Dimension(format!(
            "transport block has {} bits, TBS is {}",
            tb.len(),
            ue.info_bits()
        )));
    }
    let coded = encode(tb, &ue.code, ue.coded_bits(layout))?;
    modulate(&coded, ue.modulation)
}

/// Received samples indexed `[antenna][re]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedGrid {
    n_rx: usize,
    n_re: usize,
    data: Vec<Complex64>,
}

impl ReceivedGrid {
    pub fn zeros(n_rx: usize, n_re: usize) -> Self {
        Self {
            n_rx,
            n_re,
            data: vec![Complex64::new(0.0, 0.0); n_rx * n_re],
        }
    }

    pub fn rx_count(&self) -> usize {
        self.n_rx
    }

    pub fn re_count(&self) -> usize {
        self.n_re
    }

    pub fn get(&self, rx: usize, re: usize) -> Complex64 {
        self.data[rx * self.n_re + re]
    }

    pub fn get_mut(&mut self, rx: usize, re: usize) -> &mut Complex64 {
        &mut self.data[rx * self.n_re + re]
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.data
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Energy over a set of REs on all antennas.
    pub fn energy_in(&self, res: std::ops::Range<usize>) -> f64 {
        (0..self.n_rx)
            .map(|r| res.clone().map(|re| self.get(r, re).norm_sqr()).sum::<f64>())
            .sum()
    }
}

impl std::ops::Sub for &ReceivedGrid {
    type Output = ReceivedGrid;

    fn sub(self, rhs: &ReceivedGrid) -> ReceivedGrid {
        assert_eq!((self.n_rx, self.n_re), (rhs.n_rx, rhs.n_re));
        ReceivedGrid {
            n_rx: self.n_rx,
            n_re: self.n_re,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

/// Adds `sign * h * w * sqrt(p) * q` of one UE onto `grid`, with `h` taken
/// from the true gains (`use_estimate == false`) or the estimate.
pub fn superimpose(
    grid: &mut ReceivedGrid,
    layout: &Layout,
    ue_index: usize,
    power: f64,
    symbols: &[Complex64],
    ch: &ChannelRealization,
    use_estimate: bool,
    sign: f64,
) {
    let amp = sign * power.sqrt();
    for rx in 0..grid.n_rx {
        for (sym, q) in symbols.iter().enumerate() {
            let tx = q * amp;
            for (chip, w) in layout.spread.iter().enumerate() {
                let re = layout.re(sym, chip);
                let h = if use_estimate {
                    ch.estimate(ue_index, rx, re)
                } else {
                    ch.gain(ue_index, rx, re)
                };
                *grid.get_mut(rx, re) += h * w * tx;
            }
        }
    }
}

/// Composite received signal. UE `i` of `ues` uses channel row `i`; noise is
/// complex Gaussian with per-entry variance `noise_var` (no draws when 0).
pub fn compose_received<R: Rng + ?Sized>(
    frame: &FrameConfig,
    ues: &[UeTxConfig],
    symbols: &[Vec<Complex64>],
    ch: &ChannelRealization,
    noise_var: f64,
    rng: &mut R,
) -> Result<ReceivedGrid, PhyError> {
    frame.check_ues(ues)?;
    if symbols.len() != ues.len() {
        return Err(PhyError::Dimension(format!(
            "{} symbol streams for {} UEs",
            symbols.len(),
            ues.len()
        )));
    }
    if ch.ue_count() < ues.len()
        || ch.rx_count() != frame.receive_antennas
        || ch.re_count() != frame.re_count()
    {
        return Err(PhyError::Dimension(format!(
            "channel is {}x{}x{}, frame needs >= {} UEs x {} antennas x {} REs",
            ch.ue_count(),
            ch.rx_count(),
            ch.re_count(),
            ues.len(),
            frame.receive_antennas,
            frame.re_count()
        )));
    }
    if !(noise_var >= 0.0 && noise_var.is_finite()) {
        return Err(PhyError::InvalidConfig(format!("noise variance {noise_var}")));
    }
    let mut grid = ReceivedGrid::zeros(frame.receive_antennas, frame.re_count());
    for (i, (ue, syms)) in ues.iter().zip(symbols).enumerate() {
        let layout = frame.layout(ue.signature)?;
        if syms.len() != layout.symbols() {
            return Err(PhyError::Dimension(format!(
                "UE {i} supplies {} symbols, its allocation carries {}",
                syms.len(),
                layout.symbols()
            )));
        }
        superimpose(&mut grid, &layout, i, ue.power, syms, ch, false, 1.0);
    }
    if noise_var > 0.0 {
        for z in grid.data.iter_mut() {
            *z += complex_gaussian(rng, noise_var);
        }
    }
    Ok(grid)
}
