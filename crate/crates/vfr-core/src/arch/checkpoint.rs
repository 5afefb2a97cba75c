//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "VFRC" | u32 version | u32 meta_len | meta (canonical JSON)
//! | u32 tensor_count
//! | per tensor: u32 name_len | name bytes | u8 dtype (0 = f32)
//!               | u8 rank | u32 extents[rank] | u32 crc32(payload)
//!               | payload (f32 little-endian)
//! ```
//!
//! The meta blob carries the model spec plus provenance (build seed,
//! config hash, class labels) and the optimizer step counter. Optimizer
//! moment buffers ride in the tensor table under `opt.<param>.m` / `.v`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, ModelSpec, SpecError};
use crate::tensor::optim::ParamId;
use crate::tensor::{Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VFRC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("crc mismatch in tensor '{0}': payload corrupted")]
    Crc(String),
    #[error("tensor table inconsistency: {0}")]
    Table(String),
    #[error("unsupported dtype tag {0}")]
    Dtype(u8),
    #[error("meta blob: {0}")]
    Meta(#[from] serde_json::Error),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub seed: u64,
    pub config_hash: String,
    /// Optimizer step counter; 0 when no optimizer state is stored.
    pub opt_t: u64,
    /// Class labels for classifier checkpoints, index-aligned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

fn write_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(0u8); // dtype f32
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    let mut payload = Vec::with_capacity(data.len() * 4);
    for &v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
}

/// Serialize a model (optionally with optimizer state) to `path`.
pub fn save_checkpoint(
    model: &Model,
    meta: &CheckpointMeta,
    with_optimizer: bool,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut tensors = model.state_tensors();
    if with_optimizer {
        for p in model.store.iter() {
            tensors.push((format!("opt.{}.m", p.name), p.m.shape().to_vec(), p.m.data().to_vec()));
            tensors.push((format!("opt.{}.v", p.name), p.v.shape().to_vec(), p.v.data().to_vec()));
        }
    }

    let meta_blob = serde_json::to_vec(meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_blob);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &tensors {
        write_tensor(&mut out, name, shape, data);
    }

    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }
}

/// Load a checkpoint, rebuild the model, and restore every stored tensor.
/// Each payload's CRC is verified; a version or magic mismatch is rejected
/// outright rather than reinterpreted.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta), CheckpointError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };

    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version, supported: CHECKPOINT_VERSION });
    }
    let meta_len = r.u32("meta length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "meta blob")?)?;
    let mut model = Model::build(&meta.model, meta.seed)?;

    let count = r.u32("tensor count")? as usize;
    let mut restored = 0usize;
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| CheckpointError::Table("tensor name is not utf-8".into()))?;
        let dtype = r.u8("dtype")?;
        if dtype != 0 {
            return Err(CheckpointError::Dtype(dtype));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let stored_crc = r.u32("crc")?;
        let payload = r.take(numel * 4, &format!("payload of '{name}'"))?;
        if crc32fast::hash(payload) != stored_crc {
            return Err(CheckpointError::Crc(name));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();

        if let Some(param_name) = name.strip_prefix("opt.") {
            let (inner, slot) = param_name
                .rsplit_once('.')
                .ok_or_else(|| CheckpointError::Table(format!("malformed optimizer entry '{name}'")))?;
            let idx = (0..model.store.len())
                .find(|&i| model.store.get(ParamId(i)).name == inner)
                .ok_or_else(|| CheckpointError::Table(format!("optimizer entry for unknown parameter '{inner}'")))?;
            let p = model.store.get_mut(ParamId(idx));
            if p.value.shape() != shape.as_slice() {
                return Err(CheckpointError::Table(format!(
                    "optimizer tensor '{name}' shape {shape:?} != parameter shape {:?}",
                    p.value.shape()
                )));
            }
            let t = Tensor::new(shape, data)?;
            match slot {
                "m" => p.m = t,
                "v" => p.v = t,
                other => return Err(CheckpointError::Table(format!("unknown optimizer slot '{other}'"))),
            }
            p.t = meta.opt_t;
        } else if model.restore_tensor(&name, &shape, data)? {
            restored += 1;
        } else {
            return Err(CheckpointError::Table(format!("tensor '{name}' not present in rebuilt model")));
        }
    }

    let expected = model.state_tensors().len();
    if restored != expected {
        return Err(CheckpointError::Table(format!(
            "checkpoint restored {restored} of {expected} model tensors"
        )));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{LayerKind, LayerSpec};

    fn spec() -> ModelSpec {
        ModelSpec {
            input_shape: (1, 8, 8),
            layers: vec![
                LayerSpec::new("c1", LayerKind::Conv { in_channels: 1, out_channels: 4, k: 3, stride: 1, pad: 1 }),
                LayerSpec::new("b1", LayerKind::BatchNorm { channels: 4 }),
                LayerSpec::new("r1", LayerKind::Relu),
                LayerSpec::new("g", LayerKind::Gap),
                LayerSpec::new("d", LayerKind::Dense { in_features: 4, out_features: 2 }),
                LayerSpec::new("s", LayerKind::Softmax),
            ],
            output: "2 classes".into(),
        }
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            model: spec(),
            seed: 3,
            config_hash: "deadbeef".into(),
            opt_t: 0,
            labels: Some(vec!["a".into(), "b".into()]),
        }
    }

    #[test]
    fn round_trip_is_bit_exact_for_inference() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vfrc");
        let model = Model::build(&spec(), 3).unwrap();
        save_checkpoint(&model, &meta(), false, &path).unwrap();
        let (loaded, m) = load_checkpoint(&path).unwrap();
        assert_eq!(m.config_hash, "deadbeef");
        assert_eq!(m.labels.as_deref(), Some(&["a".to_string(), "b".to_string()][..]));

        let input = Tensor::from_fn(&[1, 1, 8, 8], |i| (i as f32 * 0.17).sin());
        let a = model.forward_infer(&input).unwrap();
        let b = loaded.forward_infer(&input).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn payload_corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vfrc");
        let model = Model::build(&spec(), 3).unwrap();
        save_checkpoint(&model, &meta(), false, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let at = bytes.len() - 5; // inside the last tensor's payload
        bytes[at] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Crc(_))));
    }

    #[test]
    fn bad_magic_and_version_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vfrc");
        let model = Model::build(&spec(), 3).unwrap();
        save_checkpoint(&model, &meta(), false, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'V';
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Version { found: 99, .. })));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vfrc");
        let model = Model::build(&spec(), 3).unwrap();
        save_checkpoint(&model, &meta(), false, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vfrc");
        let mut model = Model::build(&spec(), 3).unwrap();
        // put something nonzero into the moments
        for i in 0..model.store.len() {
            let p = model.store.get_mut(ParamId(i));
            let shape = p.m.shape().to_vec();
            p.m = Tensor::from_fn(&shape, |j| j as f32 * 0.5 + 1.0);
            p.v = Tensor::from_fn(&shape, |j| j as f32 * 0.25 + 2.0);
            p.t = 7;
        }
        let mut m = meta();
        m.opt_t = 7;
        save_checkpoint(&model, &m, true, &path).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        for (a, b) in model.store.iter().zip(loaded.store.iter()) {
            assert_eq!(a.m.data(), b.m.data());
            assert_eq!(a.v.data(), b.v.data());
            assert_eq!(b.t, 7);
        }
    }
}
