// Layout: b"AMCEECKP" | u64 LE header length | JSON header | f32 LE blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{build_baseline, build_composite, CompositeModel, Model};
use super::spec::{CompositeSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::exit_policy::ExitCriterion;
use crate::tensor::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"AMCEECKP";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    pub phase: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Baseline(Model),
    Composite(CompositeModel),
}

impl AnyModel {
    pub fn params(&self) -> &ParamStore {
        match self {
            AnyModel::Baseline(m) => &m.params,
            AnyModel::Composite(m) => &m.params,
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyModel::Baseline(m) => &mut m.params,
            AnyModel::Composite(m) => &mut m.params,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: AnyModel,
    /// Exit criteria for exits 0 and 1; empty for baselines.
    pub criteria: Vec<ExitCriterion>,
    pub meta: TrainingMeta,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Architecture {
    Baseline { spec: ModelSpec },
    Composite { spec: CompositeSpec },
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    architecture: Architecture,
    params: Vec<ParamEntry>,
    criteria: Vec<ExitCriterion>,
    meta: TrainingMeta,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let store = ckpt.model.params();
    let architecture = match &ckpt.model {
        AnyModel::Baseline(m) => Architecture::Baseline { spec: m.spec().clone() },
        AnyModel::Composite(m) => Architecture::Composite { spec: m.spec().clone() },
    };
    let mut offset = 0;
    let mut entries = Vec::with_capacity(store.len());
    let mut blob = Vec::with_capacity(store.num_scalars() * 4);
    for id in store.ids() {
        let t = store.get(id);
        entries.push(ParamEntry {
            name: store.name(id).to_owned(),
            shape: t.shape().to_vec(),
            offset,
            frozen: store.is_frozen(id),
        });
        offset += t.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        architecture,
        params: entries,
        criteria: ckpt.criteria.clone(),
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + blob.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&blob);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_bytes =
        bytes.get(16..16 + hlen).ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| Error::json(path, e))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            header.format_version
        )));
    }
    let blob = &bytes[16 + hlen..];

    let mut model = match &header.architecture {
        Architecture::Baseline { spec } => AnyModel::Baseline(build_baseline(spec, 0)?),
        Architecture::Composite { spec } => AnyModel::Composite(build_composite(spec, 0)?),
    };
    let store = model.params_mut();
    if store.len() != header.params.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} tensors, architecture has {}",
            header.params.len(),
            store.len()
        )));
    }
    for (id, entry) in store.ids().collect::<Vec<_>>().into_iter().zip(&header.params) {
        let expected = store.get(id).shape().to_vec();
        if store.name(id) != entry.name || expected != entry.shape {
            return Err(Error::Format(format!(
                "tensor {} {:?} does not match architecture tensor {} {:?}",
                entry.name,
                entry.shape,
                store.name(id),
                expected
            )));
        }
        let n = store.get(id).len();
        let raw = blob
            .get(entry.offset * 4..(entry.offset + n) * 4)
            .ok_or_else(|| Error::Format(format!("blob too short for {}", entry.name)))?;
        for (dst, b) in store.get_mut(id).data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        store.set_frozen(id, entry.frozen);
    }
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 4 {
        return Err(Error::Format(format!("blob holds {} bytes, tensors need {}", blob.len(), total * 4)));
    }
    Ok(Checkpoint { model, criteria: header.criteria, meta: header.meta })
}
