//! Rayleigh fading surrogate and additive channel-estimation error.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::FrameConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FadingModel {
    /// One draw per (UE, antenna), repeated across all REs.
    BlockFlat,
    /// Independent draw per RE.
    PerRe,
}

/// Circular complex Gaussian sample with `E|x|^2 = var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// True gains and receiver-side estimates, indexed `[ue][antenna][re]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    n_ue: usize,
    n_rx: usize,
    n_re: usize,
    gains: Vec<Complex64>,
    estimate: Vec<Complex64>,
    est_error_var: f64,
    block_flat: bool,
}

impl ChannelRealization {
    /// Builds a realization from explicit gains (estimate = gains).
    pub fn from_gains(n_ue: usize, n_rx: usize, n_re: usize, gains: Vec<Complex64>) -> Self {
        assert_eq!(gains.len(), n_ue * n_rx * n_re, "gain tensor size");
        let block_flat = (0..n_ue * n_rx).all(|p| {
            let row = &gains[p * n_re..(p + 1) * n_re];
            row.iter().all(|g| *g == row[0])
        });
        Self {
            n_ue,
            n_rx,
            n_re,
            estimate: gains.clone(),
            gains,
            est_error_var: 0.0,
            block_flat,
        }
    }

    /// Unit gains everywhere.
    pub fn identity(n_ue: usize, n_rx: usize, n_re: usize) -> Self {
        Self::from_gains(n_ue, n_rx, n_re, vec![Complex64::new(1.0, 0.0); n_ue * n_rx * n_re])
    }

    fn idx(&self, ue: usize, rx: usize, re: usize) -> usize {
        (ue * self.n_rx + rx) * self.n_re + re
    }

    pub fn gain(&self, ue: usize, rx: usize, re: usize) -> Complex64 {
        self.gains[self.idx(ue, rx, re)]
    }

    pub fn estimate(&self, ue: usize, rx: usize, re: usize) -> Complex64 {
        self.estimate[self.idx(ue, rx, re)]
    }

    pub fn gains(&self) -> &[Complex64] {
        &self.gains
    }

    pub fn estimates(&self) -> &[Complex64] {
        &self.estimate
    }

    pub fn ue_count(&self) -> usize {
        self.n_ue
    }

    pub fn rx_count(&self) -> usize {
        self.n_rx
    }

    pub fn re_count(&self) -> usize {
        self.n_re
    }

    pub fn est_error_var(&self) -> f64 {
        self.est_error_var
    }

    /// Estimated gains are equal across REs for every (UE, antenna).
    pub fn is_block_flat(&self) -> bool {
        self.block_flat
    }

    /// Mean estimated `|h|^2` of a UE over antennas and the given RE range.
    pub fn estimated_gain(&self, ue: usize, res: std::ops::Range<usize>) -> f64 {
        let count = (self.n_rx * res.len()).max(1) as f64;
        let mut acc = 0.0;
        for r in 0..self.n_rx {
            for re in res.clone() {
                acc += self.estimate(ue, r, re).norm_sqr();
            }
        }
        acc / count
    }
}

pub fn draw_channel_with<R: Rng + ?Sized>(
    frame: &FrameConfig,
    model: FadingModel,
    rng: &mut R,
) -> ChannelRealization {
    let n_ue = frame.user_capacity();
    let n_rx = frame.receive_antennas;
    let n_re = frame.re_count();
    let mut gains = Vec::with_capacity(n_ue * n_rx * n_re);
    for _ in 0..n_ue * n_rx {
        match model {
            FadingModel::BlockFlat => {
                let g = complex_gaussian(rng, 1.0);
                gains.extend(std::iter::repeat_n(g, n_re));
            }
            FadingModel::PerRe => gains.extend((0..n_re).map(|_| complex_gaussian(rng, 1.0))),
        }
    }
    ChannelRealization {
        n_ue,
        n_rx,
        n_re,
        estimate: gains.clone(),
        gains,
        est_error_var: 0.0,
        block_flat: model == FadingModel::BlockFlat,
    }
}

/// I.i.d. unit-variance Rayleigh gains, deterministic per seed.
pub fn draw_channel(frame: &FrameConfig, model: FadingModel, seed: u64) -> ChannelRealization {
    draw_channel_with(frame, model, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Fills the estimate with `h + e`, `e` complex Gaussian of variance
/// `error_var`. With zero variance the estimate equals the gains exactly and
/// no randomness is consumed.
pub fn estimate_channel_with<R: Rng + ?Sized>(
    ch: &ChannelRealization,
    error_var: f64,
    rng: &mut R,
) -> ChannelRealization {
    assert!(error_var >= 0.0 && error_var.is_finite(), "estimation error variance must be >= 0");
    let mut out = ch.clone();
    out.est_error_var = error_var;
    if error_var == 0.0 {
        out.estimate = out.gains.clone();
        return out;
    }
    if ch.block_flat {
        // one error draw per (UE, antenna) keeps the estimate block-flat
        for p in 0..ch.n_ue * ch.n_rx {
            let e = complex_gaussian(rng, error_var);
            for re in 0..ch.n_re {
                let i = p * ch.n_re + re;
                out.estimate[i] = ch.gains[i] + e;
            }
        }
    } else {
        for (est, g) in out.estimate.iter_mut().zip(&ch.gains) {
            *est = g + complex_gaussian(rng, error_var);
        }
    }
    out
}

pub fn estimate_channel(ch: &ChannelRealization, error_var: f64, seed: u64) -> ChannelRealization {
    estimate_channel_with(ch, error_var, &mut ChaCha8Rng::seed_from_u64(seed))
}
