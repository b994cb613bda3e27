use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Fading {
    None,
    FixedGain {
        re: f64,
        im: f64,
    },
    /// One circular complex Gaussian gain per frame, `E|h|^2 = 1`.
    RayleighBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub snr_db: f64,
    /// When false no noise is added and `snr_db` is ignored.
    pub noise_enabled: bool,
    pub fading: Fading,
}

impl ChannelConfig {
    pub fn awgn(snr_db: f64) -> Self {
        Self { snr_db, noise_enabled: true, fading: Fading::None }
    }

    pub fn noiseless(fading: Fading) -> Self {
        Self { snr_db: 0.0, noise_enabled: false, fading }
    }
}

fn complex_gaussian(rng: &mut ChaCha8Rng, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// `r[n] = h * s[n] + v[n]` with noise variance `|h|^2 * 10^(-snr/10)` per
/// complex sample, so the realised SNR is independent of the fading draw.
pub fn apply_channel(signal: &[Complex64], cfg: &ChannelConfig, rng_seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let h = match cfg.fading {
        Fading::None => Complex64::new(1.0, 0.0),
        Fading::FixedGain { re, im } => Complex64::new(re, im),
        Fading::RayleighBlock => complex_gaussian(&mut rng, 1.0),
    };
    if !cfg.noise_enabled {
        if cfg.fading == Fading::None {
            return signal.to_vec();
        }
        return signal.iter().map(|&s| h * s).collect();
    }
    let variance = h.norm_sqr() * 10f64.powf(-cfg.snr_db / 10.0);
    signal.iter().map(|&s| h * s + complex_gaussian(&mut rng, variance)).collect()
}
