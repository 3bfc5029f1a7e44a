//! Single-file checkpoints:
//!
//! ```text
//! b"FUTURIST" | u32 version | u64 header length | JSON header | tensor bytes
//! ```
//!
//! All integers and tensor elements are little-endian. The header carries the
//! configuration text, counters, a tensor manifest (name, shape, byte offset)
//! and a SHA-256 digest of the tensor bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Futurist;
use crate::tensor::Scalar;
use crate::training::Checkpoint;

pub const MAGIC: &[u8; 8] = b"FUTURIST";
pub const FORMAT_VERSION: u32 = 1;

const PREFIX: usize = 8 + 4 + 8;
const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    /// Every draw is a pure function of the seed and these counters.
    derivation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    config: String,
    step: u64,
    epoch: u64,
    batch_in_epoch: u64,
    rng: RngState,
    tensors: Vec<TensorRecord>,
    payload_bytes: u64,
    payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_bytes<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let model = &ckpt.model;
    let mut payload = Vec::with_capacity(3 * model.num_params() * T::BYTES);
    let mut tensors = Vec::new();
    for (group, values) in GROUPS.iter().zip([model.params(), &ckpt.adam_m, &ckpt.adam_v]) {
        for e in model.param_layout().entries() {
            let offset = payload.len() as u64;
            for &v in &values[e.range()] {
                v.write_le(&mut payload);
            }
            tensors.push(TensorRecord {
                name: format!("{group}/{}", e.name),
                shape: e.shape.clone(),
                offset,
                bytes: payload.len() as u64 - offset,
            });
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        config: model.config().to_text(),
        step: ckpt.step,
        epoch: ckpt.epoch,
        batch_in_epoch: ckpt.batch_in_epoch,
        rng: RngState {
            seed: model.config().seed,
            derivation: "splitmix64(seed, tag, counters)".into(),
        },
        tensors,
        payload_bytes: payload.len() as u64,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < PREFIX {
        return Err(Error::Corrupt(format!("file is {} bytes, shorter than the prefix", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::IncompatibleVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_end = (PREFIX as u64)
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::Corrupt("header extends past end of file".into()))? as usize;
    let header: Header =
        serde_json::from_slice(&bytes[PREFIX..header_end]).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
    if header.version != version {
        return Err(Error::Corrupt("header version disagrees with prefix".into()));
    }
    let payload = &bytes[header_end..];
    if payload.len() as u64 != header.payload_bytes {
        return Err(Error::Corrupt(format!(
            "expected {} tensor bytes, found {}",
            header.payload_bytes,
            payload.len()
        )));
    }
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(Error::Corrupt("tensor digest mismatch".into()));
    }
    if header.dtype != T::DTYPE {
        return Err(Error::Corrupt(format!("stored dtype {} but {} requested", header.dtype, T::DTYPE)));
    }
    let config = ModelConfig::parse(&header.config)?;
    let mut model = Futurist::<T>::new(config)?;
    let entries = model.param_layout().entries().to_vec();
    if header.tensors.len() != GROUPS.len() * entries.len() {
        return Err(Error::Corrupt("tensor manifest does not match the configuration".into()));
    }
    let n = model.num_params();
    let mut groups = [vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]];
    let mut records = header.tensors.iter();
    for (group, dst) in GROUPS.iter().zip(groups.iter_mut()) {
        for e in &entries {
            let rec = records.next().expect("length checked");
            if rec.name != format!("{group}/{}", e.name) || rec.shape != e.shape || rec.bytes != (e.len * T::BYTES) as u64 {
                return Err(Error::Corrupt(format!("unexpected tensor {}", rec.name)));
            }
            let start = rec.offset as usize;
            let src = payload
                .get(start..start + rec.bytes as usize)
                .ok_or_else(|| Error::Corrupt(format!("tensor {} out of bounds", rec.name)))?;
            for (v, chunk) in dst[e.range()].iter_mut().zip(src.chunks_exact(T::BYTES)) {
                *v = T::read_le(chunk);
            }
        }
    }
    let [params, adam_m, adam_v] = groups;
    model.params_mut().copy_from_slice(&params);
    Ok(Checkpoint {
        model,
        adam_m,
        adam_v,
        step: header.step,
        epoch: header.epoch,
        batch_in_epoch: header.batch_in_epoch,
    })
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    from_bytes(&bytes)
}
