//! Multiuser receivers shared by the WSMA and MU-MIMO modes.
//!
//! Detection runs per spread block (NOMA: `L` REs on every antenna, MU-MIMO:
//! one RE on every antenna) on the effective channel whose column `k` stacks
//! `h_hat_k * s_k * sqrt(p_k)` over antennas and chips. Only UEs sharing the
//! block's RE chunk enter the model. The effective channel is always built
//! from the channel estimate.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phy::{
    self, demap_llr, transmit_symbols, ChannelRealization, CodeConfig, FrameConfig, Layout,
    ModScheme, PhyError, ReceivedGrid, UeTxConfig,
};

#[derive(Debug, Error, PartialEq)]
pub enum RxError {
    #[error("singular detection problem: {0}")]
    Singular(String),
    #[error("invalid receiver input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Phy(#[from] PhyError),
}

/// Output of [`mmse_detect`] for one observation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MmseOutput {
    /// `(H^H H + sigma^2 I)^{-1} H^H y`.
    pub estimates: Vec<Complex64>,
    /// Diagonal of `W H`; dividing an estimate by it removes the MMSE bias.
    pub bias: Vec<f64>,
    /// Post-detection SINR per stream (linear).
    pub sinr: Vec<f64>,
}

/// Linear MMSE filter for a fixed effective channel.
#[derive(Debug, Clone)]
pub struct MmseFilter {
    w: DMatrix<Complex64>,
    bias: Vec<f64>,
    sinr: Vec<f64>,
}

impl MmseFilter {
    pub fn new(h: &DMatrix<Complex64>, noise_var: f64) -> Result<Self, RxError> {
        if !(noise_var >= 0.0 && noise_var.is_finite()) {
            return Err(RxError::Invalid(format!("noise variance {noise_var}")));
        }
        let k = h.ncols();
        let hh = h.adjoint();
        let mut a = &hh * h;
        for i in 0..k {
            a[(i, i)] += Complex64::new(noise_var, 0.0);
        }
        let chol = a.clone().cholesky().filter(|c| {
            // without noise regularisation, reject numerically rank-deficient channels
            noise_var > 0.0 || {
                let d = c.l_dirty().diagonal().map(|x| x.re);
                k <= h.nrows() && d.min() > 1e-7 * d.max()
            }
        });
        let inv = match chol {
            Some(c) => c.inverse(),
            None => {
                return Err(RxError::Singular(format!(
                    "H^H H + {noise_var} I is not positive definite ({} x {k} channel)",
                    h.nrows()
                )))
            }
        };
        let w = &inv * hh;
        let (bias, sinr) = (0..k)
            .map(|i| {
                if noise_var == 0.0 {
                    (1.0, f64::INFINITY)
                } else {
                    let d = (inv[(i, i)].re * noise_var).clamp(0.0, 1.0);
                    let beta = 1.0 - d;
                    let sinr = if d > 0.0 { beta / d } else { f64::INFINITY };
                    (beta, sinr)
                }
            })
            .unzip();
        Ok(Self { w, bias, sinr })
    }

    pub fn apply(&self, y: &DVector<Complex64>) -> Vec<Complex64> {
        (&self.w * y).iter().copied().collect()
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn sinr(&self) -> &[f64] {
        &self.sinr
    }
}

pub fn mmse_detect(
    y: &DVector<Complex64>,
    h: &DMatrix<Complex64>,
    noise_var: f64,
) -> Result<MmseOutput, RxError> {
    if y.len() != h.nrows() {
        return Err(RxError::Invalid(format!(
            "observation has {} entries, channel has {} rows",
            y.len(),
            h.nrows()
        )));
    }
    let f = MmseFilter::new(h, noise_var)?;
    Ok(MmseOutput {
        estimates: f.apply(y),
        bias: f.bias.clone(),
        sinr: f.sinr.clone(),
    })
}

/// Unbiased per-symbol estimates of one UE's block with per-symbol SINR.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftBlock {
    pub symbols: Vec<Complex64>,
    pub sinr: Vec<f64>,
}

impl SoftBlock {
    pub fn mean_sinr(&self) -> f64 {
        if self.sinr.is_empty() {
            return 0.0;
        }
        self.sinr.iter().sum::<f64>() / self.sinr.len() as f64
    }
}

/// SINR-weighted combination of copies of the same block; SINRs add.
pub fn mrc_combine(copies: &[SoftBlock]) -> Result<SoftBlock, RxError> {
    let first = copies
        .first()
        .ok_or_else(|| RxError::Invalid("MRC needs at least one copy".into()))?;
    let n = first.symbols.len();
    if copies.iter().any(|c| c.symbols.len() != n || c.sinr.len() != n) {
        return Err(RxError::Invalid("MRC copies differ in length".into()));
    }
    let mut symbols = Vec::with_capacity(n);
    let mut sinr = Vec::with_capacity(n);
    for i in 0..n {
        let infinite: Vec<Complex64> = copies
            .iter()
            .filter(|c| c.sinr[i].is_infinite())
            .map(|c| c.symbols[i])
            .collect();
        if !infinite.is_empty() {
            symbols.push(infinite.iter().sum::<Complex64>() / infinite.len() as f64);
            sinr.push(f64::INFINITY);
            continue;
        }
        let total: f64 = copies.iter().map(|c| c.sinr[i]).sum();
        let x = if total > 0.0 {
            copies.iter().map(|c| c.symbols[i] * c.sinr[i]).sum::<Complex64>() / total
        } else {
            Complex64::new(0.0, 0.0)
        };
        symbols.push(x);
        sinr.push(total);
    }
    Ok(SoftBlock { symbols, sinr })
}

/// Per-UE decoding result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutcome {
    pub ue: usize,
    pub crc_pass: bool,
    pub bits: Vec<u8>,
    /// Mean post-detection SINR in dB.
    pub sinr_db: f64,
    pub decode_cost: f64,
}

fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Max-log demapping, decoding and CRC check.
pub fn demap_decode(
    soft: &SoftBlock,
    scheme: ModScheme,
    code: &CodeConfig,
    info_bits: usize,
) -> Result<DecodeOutcome, RxError> {
    let llr = demap_llr(&soft.symbols, &soft.sinr, scheme);
    let d = phy::decode(&llr, code, info_bits)?;
    Ok(DecodeOutcome {
        ue: 0,
        crc_pass: d.crc_pass,
        bits: d.bits,
        sinr_db: to_db(soft.mean_sinr()),
        decode_cost: 0.0,
    })
}

/// Decodes one UE's soft block.
pub trait BlockDecoder {
    fn decode(&mut self, ue: usize, soft: &SoftBlock) -> Result<DecodeOutcome, RxError>;
}

/// The transmitter chain inverted: demap, decode, CRC.
#[derive(Debug, Clone, Copy)]
pub struct ChainDecoder<'a> {
    pub ues: &'a [UeTxConfig],
}

impl BlockDecoder for ChainDecoder<'_> {
    fn decode(&mut self, ue: usize, soft: &SoftBlock) -> Result<DecodeOutcome, RxError> {
        let cfg = &self.ues[ue];
        let mut out = demap_decode(soft, cfg.modulation, &cfg.code, cfg.info_bits())?;
        out.ue = ue;
        Ok(out)
    }
}

/// Frame, UE set and channel estimate a detector works on.
#[derive(Debug, Clone)]
pub struct LinkContext<'a> {
    pub frame: &'a FrameConfig,
    pub ues: &'a [UeTxConfig],
    pub channel: &'a ChannelRealization,
    pub noise_var: f64,
    layouts: Vec<Layout>,
}

impl<'a> LinkContext<'a> {
    pub fn new(
        frame: &'a FrameConfig,
        ues: &'a [UeTxConfig],
        channel: &'a ChannelRealization,
        noise_var: f64,
    ) -> Result<Self, RxError> {
        frame.check_ues(ues)?;
        if channel.ue_count() < ues.len()
            || channel.rx_count() != frame.receive_antennas
            || channel.re_count() != frame.re_count()
        {
            return Err(RxError::Invalid("channel does not match frame".into()));
        }
        let layouts = ues
            .iter()
            .map(|u| frame.layout(u.signature))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            frame,
            ues,
            channel,
            noise_var,
            layouts,
        })
    }

    pub fn layout(&self, ue: usize) -> &Layout {
        &self.layouts[ue]
    }

    /// Estimated received power `p_k * mean |h_hat|^2`.
    pub fn estimated_gain(&self, ue: usize) -> f64 {
        self.ues[ue].power * self.channel.estimated_gain(ue, self.layouts[ue].res())
    }

    /// Descending estimated gain, ties broken by UE index.
    pub fn default_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.ues.len()).collect();
        order.sort_by(|&a, &b| {
            self.estimated_gain(b)
                .total_cmp(&self.estimated_gain(a))
                .then(a.cmp(&b))
        });
        order
    }

    /// Effective channel of spread block `sym` for the UEs in `members`
    /// (which must share one RE chunk).
    pub fn effective_channel(&self, members: &[usize], sym: usize) -> DMatrix<Complex64> {
        let lay = &self.layouts[members[0]];
        let l = lay.spread_length();
        let n_rx = self.frame.receive_antennas;
        DMatrix::from_fn(n_rx * l, members.len(), |row, col| {
            let ue = members[col];
            let (rx, chip) = (row / l, row % l);
            let layout = &self.layouts[ue];
            let re = layout.re(sym, chip);
            self.channel.estimate(ue, rx, re) * layout.spread[chip] * self.ues[ue].power.sqrt()
        })
    }

    fn observation(&self, y: &ReceivedGrid, lay: &Layout, sym: usize) -> DVector<Complex64> {
        let l = lay.spread_length();
        DVector::from_fn(self.frame.receive_antennas * l, |row, _| {
            y.get(row / l, lay.re(sym, row % l))
        })
    }

    /// Joint MMSE detection of the `active` UEs; UEs outside `active` are not
    /// modelled. Returns one soft block per entry of `active`.
    pub fn detect(&self, y: &ReceivedGrid, active: &[usize]) -> Result<Vec<SoftBlock>, RxError> {
        let mut out: Vec<Option<SoftBlock>> = vec![None; active.len()];
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (pos, &ue) in active.iter().enumerate() {
            if ue >= self.ues.len() {
                return Err(RxError::Invalid(format!("UE {ue} not in context")));
            }
            let g = self.layouts[ue].group;
            match groups.iter_mut().find(|(gg, _)| *gg == g) {
                Some((_, list)) => list.push(pos),
                None => groups.push((g, vec![pos])),
            }
        }
        let flat = self.channel.is_block_flat();
        for (_, positions) in groups {
            let members: Vec<usize> = positions.iter().map(|&p| active[p]).collect();
            let lay = &self.layouts[members[0]];
            if members.iter().any(|&m| {
                let o = &self.layouts[m];
                o.start != lay.start || o.len != lay.len || o.spread_length() != lay.spread_length()
            }) {
                return Err(RxError::Invalid("UEs in a group must share one layout".into()));
            }
            let n_sym = lay.symbols();
            let mut blocks: Vec<SoftBlock> = members
                .iter()
                .map(|_| SoftBlock {
                    symbols: Vec::with_capacity(n_sym),
                    sinr: Vec::with_capacity(n_sym),
                })
                .collect();
            let mut filter = None;
            for sym in 0..n_sym {
                if filter.is_none() || !flat {
                    filter = Some(MmseFilter::new(&self.effective_channel(&members, sym), self.noise_var)?);
                }
                let f = filter.as_ref().expect("filter built above");
                let est = f.apply(&self.observation(y, lay, sym));
                for (i, b) in blocks.iter_mut().enumerate() {
                    let beta = f.bias[i];
                    b.symbols.push(if beta > 0.0 { est[i] / beta } else { Complex64::new(0.0, 0.0) });
                    b.sinr.push(f.sinr[i]);
                }
            }
            for (pos, block) in positions.into_iter().zip(blocks) {
                out[pos] = Some(block);
            }
        }
        Ok(out.into_iter().map(|b| b.expect("every active UE detected")).collect())
    }

    /// Removes a decoded UE's reconstructed contribution (estimated channel).
    pub fn cancel(&self, y: &mut ReceivedGrid, ue: usize, bits: &[u8]) -> Result<(), RxError> {
        let cfg = &self.ues[ue];
        let layout = &self.layouts[ue];
        let syms = transmit_symbols(bits, cfg, layout)?;
        phy::superimpose(y, layout, ue, cfg.power, &syms, self.channel, true, -1.0);
        Ok(())
    }

    /// Energy of `y` over the REs used by any UE of the context.
    pub fn residual_energy(&self, y: &ReceivedGrid) -> f64 {
        y.energy()
    }
}

/// Whether sequential decoding continues after the first decode fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RxPolicy {
    #[default]
    FullSic,
    /// Skip every later decode in the slot once the first UE fails.
    SkipOnFirstFailure,
}

/// Outcome of a SIC pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SicRun {
    /// Attempted decodes in decode order.
    pub outcomes: Vec<DecodeOutcome>,
    /// UEs whose decode was skipped by the policy.
    pub skipped: Vec<usize>,
    /// Energy of the working signal before the first decode and after each
    /// attempted decode.
    pub residual_energy: Vec<f64>,
    /// Sum of the per-attempt decode cost.
    pub decode_cost: f64,
    /// Working signal after all cancellations.
    pub residual: ReceivedGrid,
}

/// Successive interference cancellation in `order`: MMSE over the UEs not yet
/// cancelled, decode, and on CRC pass subtract the re-encoded block.
pub fn sic_decode<D: BlockDecoder>(
    ctx: &LinkContext<'_>,
    y: &ReceivedGrid,
    order: &[usize],
    decoder: &mut D,
    policy: RxPolicy,
    cost_per_decode: f64,
) -> Result<SicRun, RxError> {
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..ctx.ues.len()).collect::<Vec<_>>() {
        return Err(RxError::Invalid(format!(
            "SIC order {order:?} is not a permutation of 0..{}",
            ctx.ues.len()
        )));
    }
    let mut work = y.clone();
    let mut remaining: Vec<usize> = order.to_vec();
    let mut run = SicRun {
        outcomes: Vec::with_capacity(order.len()),
        skipped: Vec::new(),
        residual_energy: vec![ctx.residual_energy(&work)],
        decode_cost: 0.0,
        residual: ReceivedGrid::zeros(0, 0),
    };
    for (step, &ue) in order.iter().enumerate() {
        if policy == RxPolicy::SkipOnFirstFailure
            && step > 0
            && run.outcomes.first().is_some_and(|o| !o.crc_pass)
        {
            run.skipped.push(ue);
            continue;
        }
        let target = remaining.iter().position(|&u| u == ue).expect("ue pending");
        let soft = ctx.detect(&work, &remaining)?.swap_remove(target);
        let mut outcome = decoder.decode(ue, &soft)?;
        outcome.ue = ue;
        outcome.decode_cost = cost_per_decode;
        run.decode_cost += cost_per_decode;
        if outcome.crc_pass {
            ctx.cancel(&mut work, ue, &outcome.bits)?;
            remaining.remove(target);
        }
        run.residual_energy.push(ctx.residual_energy(&work));
        run.outcomes.push(outcome);
    }
    run.residual = work;
    Ok(run)
}

/// Parallel (non-successive) MMSE detection and decoding of every UE.
pub fn mmse_decode_all<D: BlockDecoder>(
    ctx: &LinkContext<'_>,
    y: &ReceivedGrid,
    decoder: &mut D,
) -> Result<Vec<DecodeOutcome>, RxError> {
    let all: Vec<usize> = (0..ctx.ues.len()).collect();
    let soft = ctx.detect(y, &all)?;
    soft.iter()
        .enumerate()
        .map(|(ue, s)| {
            let mut o = decoder.decode(ue, s)?;
            o.ue = ue;
            Ok(o)
        })
        .collect()
}
