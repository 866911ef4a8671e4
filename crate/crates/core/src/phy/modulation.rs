//! Gray-mapped QPSK and 16-QAM with unit average symbol energy, plus max-log
//! LLR demapping.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::PhyError;

/// Clamp applied to per-symbol SINR before LLR scaling.
const MAX_LLR_SINR: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModScheme {
    Qpsk,
    Qam16,
}

impl ModScheme {
    pub fn bits_per_symbol(self) -> usize {
        match self {
            ModScheme::Qpsk => 2,
            ModScheme::Qam16 => 4,
        }
    }

    /// Constellation point for the bit group `bits` (first bit is the MSB of
    /// the index).
    pub fn map(self, bits: &[u8]) -> Complex64 {
        match self {
            // 00 -> (1 + j)/sqrt(2)
            ModScheme::Qpsk => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                Complex64::new(s * sign(bits[0]), s * sign(bits[1]))
            }
            // I from (b0, b2), Q from (b1, b3): amplitude 1 or 3 Gray coded
            ModScheme::Qam16 => {
                let s = 1.0 / 10f64.sqrt();
                let i = sign(bits[0]) * (2.0 - sign(bits[2]));
                let q = sign(bits[1]) * (2.0 - sign(bits[3]));
                Complex64::new(s * i, s * q)
            }
        }
    }

    /// All points indexed by their bit pattern, MSB first.
    pub fn constellation(self) -> Vec<Complex64> {
        let m = self.bits_per_symbol();
        (0..1usize << m)
            .map(|idx| {
                let bits: Vec<u8> = (0..m).map(|b| ((idx >> (m - 1 - b)) & 1) as u8).collect();
                self.map(&bits)
            })
            .collect()
    }
}

fn sign(b: u8) -> f64 {
    1.0 - 2.0 * (b & 1) as f64
}

pub fn modulate(bits: &[u8], scheme: ModScheme) -> Result<Vec<Complex64>, PhyError> {
    let m = scheme.bits_per_symbol();
    if bits.len() % m != 0 {
        return Err(PhyError::Dimension(format!(
            "{} bits is not a multiple of {m} bits per symbol",
            bits.len()
        )));
    }
    Ok(bits.chunks(m).map(|c| scheme.map(c)).collect())
}

/// Max-log LLRs for unbiased symbol estimates whose error variance is
/// `1 / sinr`.
pub fn demap_llr(symbols: &[Complex64], sinr: &[f64], scheme: ModScheme) -> Vec<f64> {
    assert_eq!(symbols.len(), sinr.len(), "one SINR per symbol");
    let m = scheme.bits_per_symbol();
    let points = scheme.constellation();
    let mut out = Vec::with_capacity(symbols.len() * m);
    for (y, &snr) in symbols.iter().zip(sinr) {
        let w = snr.clamp(0.0, MAX_LLR_SINR);
        let dist: Vec<f64> = points.iter().map(|p| (y - p).norm_sqr()).collect();
        for b in 0..m {
            let mut d0 = f64::INFINITY;
            let mut d1 = f64::INFINITY;
            for (idx, &d) in dist.iter().enumerate() {
                if (idx >> (m - 1 - b)) & 1 == 0 {
                    d0 = d0.min(d);
                } else {
                    d1 = d1.min(d);
                }
            }
            out.push(w * (d1 - d0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qpsk_zero_zero_convention() {
        let s = modulate(&[0, 0], ModScheme::Qpsk).unwrap()[0];
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s - Complex64::new(r, r)).norm() < 1e-15);
    }

    #[test]
    fn unit_mean_energy() {
        for scheme in [ModScheme::Qpsk, ModScheme::Qam16] {
            let pts = scheme.constellation();
            let direct: f64 = pts.iter().map(|p| p.norm_sqr()).sum::<f64>() / pts.len() as f64;
            assert!((direct - 1.0).abs() < 1e-9, "{scheme:?}: {direct}");
        }
    }

    #[test]
    fn gray_adjacency() {
        for scheme in [ModScheme::Qpsk, ModScheme::Qam16] {
            let pts = scheme.constellation();
            let dmin = pts
                .iter()
                .enumerate()
                .flat_map(|(i, a)| pts.iter().skip(i + 1).map(move |b| (a - b).norm()))
                .fold(f64::INFINITY, f64::min);
            for (i, a) in pts.iter().enumerate() {
                for (j, b) in pts.iter().enumerate() {
                    if i != j && ((a - b).norm() - dmin).abs() < 1e-9 {
                        assert_eq!((i ^ j).count_ones(), 1, "{scheme:?} {i} {j}");
                    }
                }
            }
        }
    }

    #[test]
    fn noise_free_llr_signs_match_bits() {
        for scheme in [ModScheme::Qpsk, ModScheme::Qam16] {
            let m = scheme.bits_per_symbol();
            let bits: Vec<u8> = (0..(1 << m) * m).map(|i| ((i / m) >> (m - 1 - i % m)) as u8 & 1).collect();
            let syms = modulate(&bits, scheme).unwrap();
            let llr = demap_llr(&syms, &vec![10.0; syms.len()], scheme);
            for (l, b) in llr.iter().zip(&bits) {
                assert_eq!(*l < 0.0, *b == 1);
            }
        }
    }

    #[test]
    fn length_mismatch() {
        assert!(modulate(&[0, 1, 1], ModScheme::Qpsk).is_err());
        assert!(modulate(&[0, 1, 1, 0, 1, 0], ModScheme::Qam16).is_err());
    }
}
