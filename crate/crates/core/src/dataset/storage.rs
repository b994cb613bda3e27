// On-disk layout: <dir>/manifest.json + <dir>/frames.bin, the latter
// frame-major with interleaved I/Q as little-endian f32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetBundle, DatasetConfig, IqFrame, Modulation, Split};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const FRAMES: &str = "frames.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config_digest: String,
    config: DatasetConfig,
    frames: Vec<FrameEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameEntry {
    label: Modulation,
    snr_db: f64,
    frame_seed: u64,
    split: Split,
}

pub fn persist_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_digest: bundle.config.digest(),
        config: bundle.config.clone(),
        frames: bundle
            .frames
            .iter()
            .zip(&bundle.splits)
            .map(|(f, &split)| FrameEntry {
                label: f.label,
                snr_db: f.snr_db,
                frame_seed: f.frame_seed,
                split,
            })
            .collect(),
    };
    let mpath = dir.join(MANIFEST);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&mpath, e))?;
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;

    let mut blob = Vec::with_capacity(bundle.frames.len() * bundle.config.frame_len * 8);
    for f in &bundle.frames {
        for v in &f.samples {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let fpath = dir.join(FRAMES);
    fs::write(&fpath, blob).map_err(|e| Error::io(&fpath, e))
}

pub fn load_dataset(dir: &Path) -> Result<DatasetBundle> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| Error::json(&mpath, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    manifest.config.validate()?;

    let fpath = dir.join(FRAMES);
    let blob = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
    let per_frame = manifest.config.frame_len * 2;
    let expected = manifest.frames.len() * per_frame * 4;
    if blob.len() != expected {
        return Err(Error::Format(format!(
            "{} holds {} bytes, manifest implies {expected}",
            fpath.display(),
            blob.len()
        )));
    }
    let values: Vec<f32> =
        blob.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut splits = Vec::with_capacity(manifest.frames.len());
    for (entry, chunk) in manifest.frames.into_iter().zip(values.chunks_exact(per_frame)) {
        frames.push(IqFrame {
            samples: chunk.to_vec(),
            label: entry.label,
            snr_db: entry.snr_db,
            frame_seed: entry.frame_seed,
        });
        splits.push(entry.split);
    }
    Ok(DatasetBundle { config: manifest.config, frames, splits })
}

/// Digest recorded in a persisted manifest, if the directory holds one.
pub(crate) fn stored_digest(dir: &Path) -> Option<String> {
    let text = fs::read(dir.join(MANIFEST)).ok()?;
    let v: serde_json::Value = serde_json::from_slice(&text).ok()?;
    v.get("config_digest")?.as_str().map(str::to_owned)
}
