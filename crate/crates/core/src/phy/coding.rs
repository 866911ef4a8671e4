//! Channel coding surrogates: CRC-16 attachment, repetition and a rate-1/2
//! constraint-length-7 convolutional code, with circular repetition or
//! uniform puncturing to fill an exact coded-bit budget.
//!
//! LLR convention throughout: positive means bit 0 is more likely.

use serde::{Deserialize, Serialize};

use super::PhyError;

const CONV_G0: u8 = 0o133;
const CONV_G1: u8 = 0o171;
const CONV_MEMORY: usize = 6;
const CONV_STATES: usize = 1 << CONV_MEMORY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    Uncoded,
    Repetition(usize),
    Convolutional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeConfig {
    pub kind: CodeKind,
    #[serde(default = "default_crc_bits")]
    pub crc_bits: usize,
}

fn default_crc_bits() -> usize {
    16
}

impl Default for CodeConfig {
    fn default() -> Self {
        Self {
            kind: CodeKind::Convolutional,
            crc_bits: 16,
        }
    }
}

impl CodeConfig {
    pub fn new(kind: CodeKind, crc_bits: usize) -> Self {
        Self { kind, crc_bits }
    }

    pub fn validate(&self) -> Result<(), PhyError> {
        if self.crc_bits != 0 && self.crc_bits != 16 {
            return Err(PhyError::InvalidConfig(format!(
                "crc_bits must be 0 or 16, got {}",
                self.crc_bits
            )));
        }
        if let CodeKind::Repetition(0) = self.kind {
            return Err(PhyError::InvalidConfig("repetition factor must be >= 1".into()));
        }
        Ok(())
    }

    /// Length of the mother codeword for `payload` bits (info + CRC).
    fn mother_len(&self, payload: usize) -> usize {
        match self.kind {
            CodeKind::Uncoded => payload,
            CodeKind::Repetition(f) => payload * f,
            CodeKind::Convolutional => 2 * (payload + CONV_MEMORY),
        }
    }

    /// Smallest coded-bit budget accepted for `info_bits`.
    pub fn min_target_bits(&self, info_bits: usize) -> usize {
        let payload = info_bits + self.crc_bits;
        match self.kind {
            CodeKind::Convolutional => payload + CONV_MEMORY,
            _ => payload,
        }
    }
}

/// CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF), MSB first.
pub fn crc16(bits: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &b in bits {
        let top = ((crc >> 15) as u8 & 1) ^ (b & 1);
        crc <<= 1;
        if top == 1 {
            crc ^= 0x1021;
        }
    }
    crc
}

fn attach_crc(tb: &[u8], crc_bits: usize) -> Vec<u8> {
    let mut out = tb.to_vec();
    if crc_bits == 16 {
        let crc = crc16(tb);
        out.extend((0..16).rev().map(|i| ((crc >> i) & 1) as u8));
    }
    out
}

fn check_crc(payload: &[u8], crc_bits: usize) -> bool {
    if crc_bits == 0 {
        return true;
    }
    let (data, tail) = payload.split_at(payload.len() - crc_bits);
    let crc = crc16(data);
    tail.iter()
        .enumerate()
        .all(|(i, &b)| ((crc >> (15 - i)) & 1) as u8 == b)
}

fn parity(x: u8) -> u8 {
    (x.count_ones() & 1) as u8
}

fn conv_outputs(reg: u8) -> (u8, u8) {
    (parity(reg & CONV_G0), parity(reg & CONV_G1))
}

/// Zero-terminated rate-1/2 encoding.
pub fn conv_encode(bits: &[u8]) -> Vec<u8> {
    let mut state: u8 = 0;
    let mut out = Vec::with_capacity(2 * (bits.len() + CONV_MEMORY));
    for &u in bits.iter().chain(std::iter::repeat_n(&0u8, CONV_MEMORY)) {
        let reg = ((u & 1) << CONV_MEMORY) | state;
        let (a, b) = conv_outputs(reg);
        out.push(a);
        out.push(b);
        state = reg >> 1;
    }
    out
}

/// Soft-input Viterbi decoding of a zero-terminated codeword, returning the
/// `n` input bits.
pub fn conv_decode(llrs: &[f64], n: usize) -> Vec<u8> {
    let steps = n + CONV_MEMORY;
    assert_eq!(llrs.len(), 2 * steps, "codeword length mismatch");
    let mut metric = [f64::NEG_INFINITY; CONV_STATES];
    metric[0] = 0.0;
    let mut decisions = vec![0u64; steps];
    let mut table = [[(0.0f64, 0.0f64); 2]; CONV_STATES];
    for (s, row) in table.iter_mut().enumerate() {
        for u in 0..2u8 {
            let (a, b) = conv_outputs((u << CONV_MEMORY) | s as u8);
            row[u as usize] = (1.0 - 2.0 * a as f64, 1.0 - 2.0 * b as f64);
        }
    }
    for (t, decision) in decisions.iter_mut().enumerate() {
        let (l0, l1) = (llrs[2 * t], llrs[2 * t + 1]);
        let mut next = [f64::NEG_INFINITY; CONV_STATES];
        for (n_state, slot) in next.iter_mut().enumerate() {
            let u = n_state >> (CONV_MEMORY - 1);
            let mut best = f64::NEG_INFINITY;
            let mut choice = 0u64;
            for low in 0..2usize {
                let prev = ((n_state << 1) & (CONV_STATES - 1)) | low;
                if metric[prev] == f64::NEG_INFINITY {
                    continue;
                }
                let (sa, sb) = table[prev][u];
                let m = metric[prev] + sa * l0 + sb * l1;
                if m > best {
                    best = m;
                    choice = low as u64;
                }
            }
            *slot = best;
            *decision |= choice << n_state;
        }
        metric = next;
    }
    let mut state = 0usize;
    let mut bits = vec![0u8; steps];
    for t in (0..steps).rev() {
        bits[t] = (state >> (CONV_MEMORY - 1)) as u8;
        let low = ((decisions[t] >> state) & 1) as usize;
        state = ((state << 1) & (CONV_STATES - 1)) | low;
    }
    bits.truncate(n);
    bits
}

/// Index in the mother codeword read at output position `i`.
fn rate_match_index(i: usize, mother: usize, target: usize) -> usize {
    if target >= mother {
        i % mother
    } else {
        i * mother / target
    }
}

/// CRC attachment, encoding, and rate adaptation to exactly `target_bits`.
pub fn encode(tb: &[u8], cfg: &CodeConfig, target_bits: usize) -> Result<Vec<u8>, PhyError> {
    cfg.validate()?;
    let min = cfg.min_target_bits(tb.len());
    if target_bits < min {
        return Err(PhyError::TargetTooSmall {
            target: target_bits,
            required: min,
        });
    }
    let payload = attach_crc(tb, cfg.crc_bits);
    let mother = match cfg.kind {
        CodeKind::Uncoded => payload,
        CodeKind::Repetition(f) => payload
            .iter()
            .flat_map(|&b| std::iter::repeat_n(b, f))
            .collect(),
        CodeKind::Convolutional => conv_encode(&payload),
    };
    let m = mother.len();
    Ok((0..target_bits)
        .map(|i| mother[rate_match_index(i, m, target_bits)])
        .collect())
}

/// Result of [`decode`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub bits: Vec<u8>,
    pub crc_pass: bool,
}

/// Inverse of [`encode`] on soft input: LLRs of repeated positions are summed,
/// punctured positions get zero.
pub fn decode(llrs: &[f64], cfg: &CodeConfig, info_bits: usize) -> Result<Decoded, PhyError> {
    cfg.validate()?;
    let target = llrs.len();
    let min = cfg.min_target_bits(info_bits);
    if target < min {
        return Err(PhyError::TargetTooSmall {
            target,
            required: min,
        });
    }
    let payload_len = info_bits + cfg.crc_bits;
    let m = cfg.mother_len(payload_len);
    let mut mother = vec![0.0f64; m];
    for (i, &l) in llrs.iter().enumerate() {
        mother[rate_match_index(i, m, target)] += l;
    }
    let payload: Vec<u8> = match cfg.kind {
        CodeKind::Uncoded => mother.iter().map(|&l| u8::from(l < 0.0)).collect(),
        CodeKind::Repetition(f) => mother
            .chunks(f)
            .map(|c| u8::from(c.iter().sum::<f64>() < 0.0))
            .collect(),
        CodeKind::Convolutional => conv_decode(&mother, payload_len),
    };
    let crc_pass = check_crc(&payload, cfg.crc_bits);
    let mut bits = payload;
    bits.truncate(info_bits);
    Ok(Decoded { bits, crc_pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hard_llr(bits: &[u8]) -> Vec<f64> {
        bits.iter().map(|&b| if b == 0 { 1.0 } else { -1.0 }).collect()
    }

    #[test]
    fn uncoded_fills_target_with_info_first() {
        let tb = vec![1, 0, 1, 1, 0, 0, 1, 0];
        let cfg = CodeConfig::new(CodeKind::Uncoded, 16);
        let coded = encode(&tb, &cfg, 24).unwrap();
        assert_eq!(coded.len(), 24);
        assert_eq!(&coded[..8], &tb[..]);
    }

    #[test]
    fn repetition_duplicates_each_bit() {
        let cfg = CodeConfig::new(CodeKind::Repetition(2), 0);
        let coded = encode(&[1, 0, 0, 1], &cfg, 8).unwrap();
        assert_eq!(coded, vec![1, 1, 0, 0, 0, 0, 1, 1]);
    }

    #[test]
    fn convolutional_noise_free_loopback() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tb: Vec<u8> = (0..160).map(|_| rng.random_range(0..2)).collect();
        let cfg = CodeConfig::default();
        for target in [200, 364, 432, 1000] {
            let coded = encode(&tb, &cfg, target).unwrap();
            assert_eq!(coded.len(), target);
            let d = decode(&hard_llr(&coded), &cfg, tb.len()).unwrap();
            assert!(d.crc_pass, "target {target}");
            assert_eq!(d.bits, tb);
        }
    }

    #[test]
    fn viterbi_corrects_scattered_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tb: Vec<u8> = (0..100).map(|_| rng.random_range(0..2)).collect();
        let cfg = CodeConfig::default();
        let coded = encode(&tb, &cfg, cfg.mother_len(116)).unwrap();
        let mut llr = hard_llr(&coded);
        for i in (0..llr.len()).step_by(17) {
            llr[i] = -llr[i];
        }
        let d = decode(&llr, &cfg, tb.len()).unwrap();
        assert!(d.crc_pass);
        assert_eq!(d.bits, tb);
    }

    #[test]
    fn crc_detects_single_flip() {
        let tb = vec![0u8; 40];
        let cfg = CodeConfig::new(CodeKind::Uncoded, 16);
        let coded = encode(&tb, &cfg, 56).unwrap();
        let mut llr = hard_llr(&coded);
        llr[3] = -1.0;
        assert!(!decode(&llr, &cfg, 40).unwrap().crc_pass);
        // all-zero LLRs decode to the all-zero word, which fails the 0xFFFF-initialized CRC
        assert!(!decode(&vec![0.0; 56], &cfg, 40).unwrap().crc_pass);
    }

    #[test]
    fn target_too_small_is_rejected() {
        let cfg = CodeConfig::default();
        assert!(matches!(
            encode(&[0; 10], &cfg, 20),
            Err(PhyError::TargetTooSmall { required: 32, .. })
        ));
        assert!(encode(&[0; 8], &CodeConfig::new(CodeKind::Uncoded, 16), 23).is_err());
        assert!(CodeConfig::new(CodeKind::Uncoded, 8).validate().is_err());
    }

    #[test]
    fn code_config_serde_shape() {
        let text = serde_json::to_string(&CodeConfig::new(CodeKind::Repetition(3), 16)).unwrap();
        assert_eq!(text, r#"{"kind":{"repetition":3},"crc_bits":16}"#);
        let back: CodeConfig = serde_json::from_str(r#"{"kind":"convolutional"}"#).unwrap();
        assert_eq!(back, CodeConfig::default());
    }
}
