//! Synthetic labelled IQ frames: Gray-mapped symbols, RRC pulse shaping,
//! flat fading plus AWGN, and a per-pair train/val/test split.

mod channel;
mod modulation;
mod pulse;
mod storage;

pub use channel::{apply_channel, ChannelConfig, Fading};
pub use modulation::{modulate, Modulation};
pub use pulse::{rrc_taps, synthesize_baseband};
pub(crate) use storage::stored_digest;
pub use storage::{load_dataset, persist_dataset, FORMAT_VERSION};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::iq_tensor;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub modulations: Vec<Modulation>,
    pub snr_grid_db: Vec<f64>,
    pub frames_per_pair: usize,
    pub frame_len: usize,
    #[serde(default = "default_sps")]
    pub sps: usize,
    #[serde(default = "default_rolloff")]
    pub rrc_rolloff: f64,
    #[serde(default = "default_span")]
    pub rrc_span_symbols: usize,
    pub master_seed: u64,
    pub split_counts: SplitCounts,
    #[serde(default = "default_fading")]
    pub fading: Fading,
}

fn default_sps() -> usize {
    8
}
fn default_rolloff() -> f64 {
    0.35
}
fn default_span() -> usize {
    8
}
fn default_fading() -> Fading {
    Fading::RayleighBlock
}

impl Default for DatasetConfig {
    /// Full-scale recipe: six modulations, -20..=20 dB in 2 dB steps,
    /// 1024 frames of 1024 samples per pair, split 768/128/128.
    fn default() -> Self {
        Self {
            modulations: Modulation::ALL.to_vec(),
            snr_grid_db: (-10..=10).map(|i| 2.0 * i as f64).collect(),
            frames_per_pair: 1024,
            frame_len: 1024,
            sps: default_sps(),
            rrc_rolloff: default_rolloff(),
            rrc_span_symbols: default_span(),
            master_seed: 0,
            split_counts: SplitCounts { train: 768, val: 128, test: 128 },
            fading: default_fading(),
        }
    }
}

impl DatasetConfig {
    /// Laptop-scale profile: five SNRs, 96 frames per pair and no fading.
    /// With random per-frame phase the small training set is not enough to
    /// learn rotation-invariant features, so only AWGN is applied here.
    pub fn desk() -> Self {
        Self {
            fading: Fading::None,
            snr_grid_db: vec![-10.0, -4.0, 0.0, 4.0, 10.0],
            frames_per_pair: 96,
            split_counts: SplitCounts { train: 72, val: 12, test: 12 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.modulations.is_empty() {
            return fail("no modulations".into());
        }
        let mut seen = self.modulations.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modulations.len() {
            return fail("duplicate modulation".into());
        }
        if self.snr_grid_db.is_empty() || self.snr_grid_db.iter().any(|s| !s.is_finite()) {
            return fail("snr grid must be non-empty and finite".into());
        }
        if self.frames_per_pair == 0 {
            return fail("frames_per_pair must be positive".into());
        }
        if self.split_counts.total() != self.frames_per_pair {
            return fail(format!(
                "split counts sum to {} but frames_per_pair is {}",
                self.split_counts.total(),
                self.frames_per_pair
            ));
        }
        if self.frame_len == 0 || !self.frame_len.is_multiple_of(16) {
            return fail(format!("frame_len {} must be a positive multiple of 16", self.frame_len));
        }
        if self.sps < 2 {
            return fail(format!("sps {} must be >= 2", self.sps));
        }
        if !(self.rrc_rolloff > 0.0 && self.rrc_rolloff < 1.0) {
            return fail(format!("rolloff {} outside (0, 1)", self.rrc_rolloff));
        }
        if self.rrc_span_symbols < 4 {
            return fail(format!("rrc span {} must be >= 4", self.rrc_span_symbols));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.modulations.len() * self.snr_grid_db.len() * self.frames_per_pair
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }
}

/// One labelled frame. `samples` holds `frame_len` interleaved I/Q pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct IqFrame {
    pub samples: Vec<f32>,
    pub label: Modulation,
    pub snr_db: f64,
    pub frame_seed: u64,
}

impl IqFrame {
    pub fn len(&self) -> usize {
        self.samples.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `count` IQ pairs starting at sample `offset`, as `[count * 2]` interleaved values.
    pub fn window(&self, offset: usize, count: usize) -> Option<&[f32]> {
        self.samples.get(offset * 2..(offset + count) * 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub config: DatasetConfig,
    pub frames: Vec<IqFrame>,
    pub splits: Vec<Split>,
}

impl DatasetBundle {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits.iter().enumerate().filter(|(_, s)| **s == split).map(|(i, _)| i).collect()
    }
}

/// A model-ready frame window: `[len, 2]` IQ input with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frame_id: usize,
    /// First IQ pair of the window within its frame.
    pub offset: usize,
    pub input: Tensor,
    pub label: usize,
    pub snr_db: f64,
}

impl Sample {
    /// Identifies the window: `(frame_id, offset)`.
    pub fn key(&self) -> (usize, usize) {
        (self.frame_id, self.offset)
    }
}

impl DatasetBundle {
    /// Windows `[offset, offset + len)` of every frame in `split`.
    pub fn samples(&self, split: Split, offset: usize, len: usize) -> Result<Vec<Sample>> {
        if offset + len > self.config.frame_len {
            return Err(Error::Config(format!(
                "window [{offset}, {}) exceeds frame length {}",
                offset + len,
                self.config.frame_len
            )));
        }
        Ok(self
            .indices(split)
            .into_iter()
            .map(|i| {
                let f = &self.frames[i];
                Sample {
                    frame_id: i,
                    offset,
                    input: iq_tensor(f.window(offset, len).expect("window checked")),
                    label: f.label.class_index(),
                    snr_db: f.snr_db,
                }
            })
            .collect())
    }

    /// The first `windows` back-to-back windows of length `len` of every
    /// frame in `split`, grouped by window position.
    pub fn windowed_samples(&self, split: Split, len: usize, windows: usize) -> Result<Vec<Sample>> {
        if windows == 0 {
            return Err(Error::Config("at least one window per frame is required".into()));
        }
        let mut out = Vec::new();
        for w in 0..windows {
            out.extend(self.samples(split, w * len, len)?);
        }
        Ok(out)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one frame; a pure function of its coordinates so frames can be
/// synthesised in any order.
pub fn frame_seed(master_seed: u64, mod_idx: usize, snr_idx: usize, frame_idx: usize) -> u64 {
    let h = splitmix64(master_seed);
    let h = splitmix64(h ^ mod_idx as u64);
    let h = splitmix64(h ^ snr_idx as u64);
    splitmix64(h ^ frame_idx as u64)
}

// keeps the split stream apart from every frame stream
const SPLIT_TAG: u64 = 0x5eed_0000_5b11_7000;

fn split_seed(master_seed: u64, mod_idx: usize, snr_idx: usize) -> u64 {
    splitmix64(frame_seed(master_seed, mod_idx, snr_idx, 0) ^ SPLIT_TAG)
}

fn synthesize_frame(cfg: &DatasetConfig, label: Modulation, snr_db: f64, seed: u64) -> IqFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = cfg.rrc_span_symbols;
    // pad by a full filter span on each side so the kept window has no edge transient
    let n_symbols = cfg.frame_len.div_ceil(cfg.sps) + 2 * span;
    let bits: Vec<u8> = (0..n_symbols * label.bits_per_symbol()).map(|_| rng.gen_range(0..2u8)).collect();
    let symbols = modulate(&bits, label).expect("bit count is a symbol multiple");
    let wave = synthesize_baseband(&symbols, cfg.sps, cfg.rrc_rolloff, span).expect("config validated");
    let start = span * cfg.sps;
    let mut window: Vec<Complex64> = wave[start..start + cfg.frame_len].to_vec();
    pulse::normalize_power(&mut window);
    let channel = ChannelConfig { snr_db, noise_enabled: true, fading: cfg.fading };
    let received = apply_channel(&window, &channel, rng.next_u64());
    let samples = received.iter().flat_map(|c| [c.re as f32, c.im as f32]).collect();
    IqFrame { samples, label, snr_db, frame_seed: seed }
}

/// Generates every (modulation, SNR) pair in modulation-major order.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let coords: Vec<(Modulation, usize, usize)> = cfg
        .modulations
        .iter()
        .flat_map(|&m| {
            (0..cfg.snr_grid_db.len()).flat_map(move |s| (0..cfg.frames_per_pair).map(move |f| (m, s, f)))
        })
        .collect();
    let frames: Vec<IqFrame> = coords
        .par_iter()
        .map(|&(m, s, f)| {
            let seed = frame_seed(cfg.master_seed, m.class_index(), s, f);
            synthesize_frame(cfg, m, cfg.snr_grid_db[s], seed)
        })
        .collect();

    let mut splits = Vec::with_capacity(frames.len());
    for &m in &cfg.modulations {
        for s in 0..cfg.snr_grid_db.len() {
            let mut pair = vec![Split::Test; cfg.frames_per_pair];
            pair[..cfg.split_counts.train].fill(Split::Train);
            pair[cfg.split_counts.train..cfg.split_counts.train + cfg.split_counts.val].fill(Split::Val);
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.master_seed, m.class_index(), s));
            pair.shuffle(&mut rng);
            splits.extend(pair);
        }
    }
    Ok(DatasetBundle { config: cfg.clone(), frames, splits })
}
