use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The digital modulations the classifier distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modulation {
    #[serde(rename = "BPSK")]
    Bpsk,
    #[serde(rename = "QPSK")]
    Qpsk,
    #[serde(rename = "PSK8")]
    Psk8,
    #[serde(rename = "PAM4")]
    Pam4,
    #[serde(rename = "QAM16")]
    Qam16,
    #[serde(rename = "QAM64")]
    Qam64,
}

impl Modulation {
    pub const ALL: [Modulation; 6] = [
        Modulation::Bpsk,
        Modulation::Qpsk,
        Modulation::Psk8,
        Modulation::Pam4,
        Modulation::Qam16,
        Modulation::Qam64,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Bpsk => "BPSK",
            Modulation::Qpsk => "QPSK",
            Modulation::Psk8 => "PSK8",
            Modulation::Pam4 => "PAM4",
            Modulation::Qam16 => "QAM16",
            Modulation::Qam64 => "QAM64",
        }
    }

    /// Position in [`Modulation::ALL`]; this is the class index used by the models.
    pub fn class_index(self) -> usize {
        Self::ALL.iter().position(|&m| m == self).unwrap()
    }

    pub fn from_class_index(idx: usize) -> Option<Self> {
        Self::ALL.get(idx).copied()
    }

    pub fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Bpsk => 1,
            Modulation::Qpsk | Modulation::Pam4 => 2,
            Modulation::Psk8 => 3,
            Modulation::Qam16 => 4,
            Modulation::Qam64 => 6,
        }
    }

    /// Unit-average-power constellation, indexed by the integer value of
    /// the Gray-coded bit group (first bit most significant).
    pub fn constellation(self) -> Vec<Complex64> {
        let m = 1usize << self.bits_per_symbol();
        match self {
            Modulation::Bpsk => vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
            Modulation::Pam4 => {
                let scale = 5f64.sqrt();
                (0..m).map(|w| Complex64::new(gray_pam_level(w, 2) / scale, 0.0)).collect()
            }
            Modulation::Qpsk => {
                // one bit per axis, bit 0 -> +1
                let s = 1.0 / 2f64.sqrt();
                (0..m)
                    .map(|w| {
                        let i = if w & 0b10 == 0 { s } else { -s };
                        let q = if w & 0b01 == 0 { s } else { -s };
                        Complex64::new(i, q)
                    })
                    .collect()
            }
            Modulation::Psk8 => (0..m)
                .map(|w| Complex64::from_polar(1.0, 2.0 * PI * gray_decode(w) as f64 / m as f64))
                .collect(),
            Modulation::Qam16 | Modulation::Qam64 => {
                let axis_bits = self.bits_per_symbol() / 2;
                let levels = 1usize << axis_bits;
                // mean |point|^2 of a square M-QAM with odd-integer levels is 2(M-1)/3
                let scale = (2.0 * (m as f64 - 1.0) / 3.0).sqrt();
                (0..m)
                    .map(|w| {
                        let i = gray_pam_level(w >> axis_bits, axis_bits);
                        let q = gray_pam_level(w & (levels - 1), axis_bits);
                        Complex64::new(i / scale, q / scale)
                    })
                    .collect()
            }
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown modulation {s:?}")))
    }
}

fn gray_decode(mut g: usize) -> usize {
    let mut b = g;
    while g > 0 {
        g >>= 1;
        b ^= g;
    }
    b
}

/// Odd-integer amplitude level `2k - (M-1)` of the Gray word `w`.
fn gray_pam_level(w: usize, bits: usize) -> f64 {
    let m = 1usize << bits;
    let k = gray_decode(w);
    (2 * k) as f64 - (m as f64 - 1.0)
}

/// Maps bits (values 0/1) onto constellation symbols.
pub fn modulate(bits: &[u8], scheme: Modulation) -> Result<Vec<Complex64>> {
    let k = scheme.bits_per_symbol();
    if !bits.len().is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!(
            "{} bits is not a multiple of {k} bits per {} symbol",
            bits.len(),
            scheme
        )));
    }
    if let Some(b) = bits.iter().find(|&&b| b > 1) {
        return Err(Error::InvalidArgument(format!("bit value {b} is not 0 or 1")));
    }
    let points = scheme.constellation();
    Ok(bits
        .chunks_exact(k)
        .map(|group| {
            let word = group.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
            points[word]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bpsk_convention() {
        let s = modulate(&[0, 1, 1, 0], Modulation::Bpsk).unwrap();
        let re: Vec<f64> = s.iter().map(|c| c.re).collect();
        assert_eq!(re, vec![1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn pam4_zero_word_is_lowest_level() {
        let s = modulate(&[0, 0], Modulation::Pam4).unwrap();
        assert!((s[0].re + 3.0 / 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[0].im, 0.0);
    }

    #[test]
    fn constellations_have_unit_power_and_right_size() {
        for m in Modulation::ALL {
            let pts = m.constellation();
            assert_eq!(pts.len(), 1 << m.bits_per_symbol());
            let p: f64 = pts.iter().map(|c| c.norm_sqr()).sum::<f64>() / pts.len() as f64;
            assert!((p - 1.0).abs() < 1e-12, "{m}: {p}");
        }
    }

    #[test]
    fn neighbouring_gray_words_differ_by_one_bit() {
        // adjacent PAM levels must carry words at Hamming distance 1
        for bits in 1..=3 {
            let m = 1usize << bits;
            let mut by_level: Vec<(f64, usize)> = (0..m).map(|w| (gray_pam_level(w, bits), w)).collect();
            by_level.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for pair in by_level.windows(2) {
                assert_eq!((pair[0].1 ^ pair[1].1).count_ones(), 1);
            }
        }
    }

    #[test]
    fn rejects_ragged_bit_count() {
        assert!(modulate(&[0, 1, 0], Modulation::Qpsk).is_err());
        assert!(modulate(&[0, 2], Modulation::Qpsk).is_err());
    }

    #[test]
    fn empirical_power_of_random_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for m in Modulation::ALL {
            let k = m.bits_per_symbol();
            let n = 1_000_000 / k * k;
            let bits: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let syms = modulate(&bits, m).unwrap();
            let p = syms.iter().map(|c| c.norm_sqr()).sum::<f64>() / syms.len() as f64;
            assert!((p - 1.0).abs() < 0.01, "{m}: {p}");
        }
    }
}
