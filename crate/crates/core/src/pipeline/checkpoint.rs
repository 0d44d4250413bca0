//! Checkpoint file layout: magic `QCKP`, format version (u32), header length
//! (u64), JSON header, concatenated `QTNS` tensor blobs, then a SHA-256 of
//! everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{Model, ModelConfig};
use super::optim::AdamState;
use super::train::StepMetrics;
use super::{Group, Stage, StageConfig};
use crate::error::{Error, Result};
use crate::numcore::{decode_tensor, encode_tensor, Scalar, Tensor};
use crate::params::Params;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"QCKP";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub steps: usize,
    pub seed: u64,
    pub lambda: f64,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Next step to run; batches and perturbations are derived from it.
    pub next_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub stage: Stage,
    pub step: usize,
    pub stage_config: StageConfig,
    pub model_config: ModelConfig,
    pub rng: RngState,
    pub history: Vec<StageRecord>,
    pub last_metrics: Option<StepMetrics>,
    pub group_hashes: BTreeMap<Group, String>,
    pub adam_steps: BTreeMap<String, u64>,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub model: Model<T>,
    pub optim: AdamState<T>,
}

pub(crate) fn dtype_name<T: Scalar>() -> String {
    format!("{:?}", T::DTYPE).to_lowercase()
}

impl<T: Scalar> Checkpoint<T> {
    /// True once the stage named in the header has run all its steps.
    pub fn complete(&self) -> bool {
        self.header.step >= self.header.stage_config.steps
    }
}

pub fn checkpoint_save<T: Scalar>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut blobs = Vec::new();
    let mut index = Vec::new();
    let mut push = |name: String, t: &Tensor<T>| {
        let start = blobs.len();
        encode_tensor(t, &mut blobs);
        index.push(TensorEntry {
            name,
            offset: start as u64,
            length: (blobs.len() - start) as u64,
        });
    };
    ck.model.visit(&mut |n, t| push(n, t));
    for (name, (m, v)) in &ck.optim.moments {
        push(format!("adam.m.{name}"), m);
        push(format!("adam.v.{name}"), v);
    }
    let mut header = ck.header.clone();
    header.format_version = CHECKPOINT_VERSION;
    header.dtype = dtype_name::<T>();
    header.adam_steps = ck.optim.steps.clone();
    header.tensors = index;
    let json = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + json.len() + blobs.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn checkpoint_load<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 16 + DIGEST_LEN {
        return Err(Error::Integrity(format!("checkpoint truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checkpoint checksum mismatch".into()));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let json = body
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| Error::Integrity("checkpoint header truncated".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::Integrity(format!("checkpoint header: {e}")))?;
    if header.dtype != dtype_name::<T>() {
        return Err(Error::Input(format!(
            "checkpoint holds {} tensors, requested {}",
            header.dtype,
            dtype_name::<T>()
        )));
    }
    let blobs = &body[16 + hlen..];
    let mut tensors = BTreeMap::new();
    for e in &header.tensors {
        let (start, len) = (e.offset as usize, e.length as usize);
        let slice = blobs
            .get(start..start.saturating_add(len))
            .ok_or_else(|| Error::Integrity(format!("tensor `{}` out of bounds", e.name)))?;
        let (t, used) = decode_tensor::<T>(slice)?;
        if used != len {
            return Err(Error::Integrity(format!("tensor `{}` length mismatch", e.name)));
        }
        tensors.insert(e.name.clone(), t);
    }

    let mut model = Model::<T>::init(header.model_config.clone(), 0)?;
    let mut missing = None;
    model.visit_mut(&mut |name, t| match tensors.remove(&name) {
        Some(v) if v.shape() == t.shape() => *t = v,
        _ => {
            missing.get_or_insert(name);
        }
    });
    if let Some(name) = missing {
        return Err(Error::Integrity(format!("parameter `{name}` missing or misshapen")));
    }

    let mut optim = AdamState::default();
    for (name, &t) in &header.adam_steps {
        let m = tensors.remove(&format!("adam.m.{name}"));
        let v = tensors.remove(&format!("adam.v.{name}"));
        match (m, v) {
            (Some(m), Some(v)) => {
                optim.moments.insert(name.clone(), (m, v));
                optim.steps.insert(name.clone(), t);
            }
            _ => return Err(Error::Integrity(format!("optimizer state for `{name}` missing"))),
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Integrity(format!("unexpected tensor `{extra}`")));
    }
    Ok(Checkpoint { header, model, optim })
}

pub fn save_checkpoint_file<T: Scalar>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, checkpoint_save(ck)?)?;
    Ok(())
}

pub fn load_checkpoint_file<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    checkpoint_load(&fs::read(path)?)
}
