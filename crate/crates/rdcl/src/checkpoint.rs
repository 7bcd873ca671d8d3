//! Versioned model checkpoints: a JSON header plus raw little-endian f32
//! tensor data, optionally including optimizer moments for resume.

use std::io::Read;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CodecModel, ModelConfig, ModelError};
use crate::nn::Adam;

pub const CKPT_MAGIC: [u8; 4] = *b"RDCK";
pub const CKPT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
    has_moments: bool,
    adam_steps: u64,
}

/// Optimizer state recovered from a checkpoint.
pub struct ResumeState {
    pub adam_steps: u64,
    pub has_moments: bool,
}

pub fn save_checkpoint(
    model: &CodecModel,
    adam: Option<&Adam>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let header = CkptHeader {
        config: model.config.clone(),
        tensors: model
            .store
            .entries
            .iter()
            .map(|e| TensorMeta { name: e.name.clone(), shape: e.value.shape().to_vec() })
            .collect(),
        has_moments: adam.is_some(),
        adam_steps: adam.map(|a| a.step_count).unwrap_or(0),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC);
    out.push(CKPT_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let mut push_arr = |a: &ArrayD<f32>| {
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for e in &model.store.entries {
        push_arr(&e.value);
    }
    if adam.is_some() {
        for e in &model.store.entries {
            push_arr(&e.m);
        }
        for e in &model.store.entries {
            push_arr(&e.v);
        }
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(".ckpt.tmp{}", std::process::id()));
    std::fs::write(&tmp, &out)
        .map_err(|e| CheckpointError::Io { path: tmp.display().to_string(), reason: e.to_string() })?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), reason: e.to_string() })
}

pub fn load_checkpoint(path: &Path) -> Result<(CodecModel, ResumeState), CheckpointError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), reason: e.to_string() })?;
    let mut r = std::io::Cursor::new(&bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if magic != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut v = [0u8; 1];
    r.read_exact(&mut v).map_err(|_| CheckpointError::Corrupt("missing version".into()))?;
    if v[0] != CKPT_VERSION {
        return Err(CheckpointError::Version(v[0]));
    }
    let mut lenb = [0u8; 4];
    r.read_exact(&mut lenb).map_err(|_| CheckpointError::Corrupt("missing header".into()))?;
    let mut json = vec![0u8; u32::from_le_bytes(lenb) as usize];
    r.read_exact(&mut json).map_err(|_| CheckpointError::Corrupt("truncated header".into()))?;
    let header: CkptHeader = serde_json::from_slice(&json)
        .map_err(|e| CheckpointError::Corrupt(format!("header json: {e}")))?;

    let mut model = CodecModel::new(header.config.clone())?;
    if model.store.entries.len() != header.tensors.len() {
        return Err(CheckpointError::Corrupt(format!(
            "tensor count mismatch: file has {}, architecture has {}",
            header.tensors.len(),
            model.store.entries.len()
        )));
    }
    let mut read_arr = |shape: &[usize]| -> Result<ArrayD<f32>, CheckpointError> {
        let n: usize = shape.iter().product();
        let mut data = vec![0f32; n];
        let mut buf = [0u8; 4];
        for slot in data.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| CheckpointError::Corrupt("truncated tensor data".into()))?;
            *slot = f32::from_le_bytes(buf);
        }
        ArrayD::from_shape_vec(IxDyn(shape), data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))
    };
    for (i, meta) in header.tensors.iter().enumerate() {
        let entry = &model.store.entries[i];
        if entry.name != meta.name || entry.value.shape() != meta.shape.as_slice() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {i} mismatch: file has {} {:?}, architecture has {} {:?}",
                meta.name,
                meta.shape,
                entry.name,
                entry.value.shape()
            )));
        }
    }
    for i in 0..header.tensors.len() {
        let arr = read_arr(&header.tensors[i].shape)?;
        model.store.entries[i].value = arr;
    }
    if header.has_moments {
        for i in 0..header.tensors.len() {
            model.store.entries[i].m = read_arr(&header.tensors[i].shape)?;
        }
        for i in 0..header.tensors.len() {
            model.store.entries[i].v = read_arr(&header.tensors[i].shape)?;
        }
    }
    Ok((model, ResumeState { adam_steps: header.adam_steps, has_moments: header.has_moments }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ContextKind;
    use ndarray::Array3;

    #[test]
    fn checkpoint_roundtrip_preserves_behavior() {
        let mut model = CodecModel::new(
            ModelConfig::toy("baseline_conv", ContextKind::Checkerboard, 8, 80, 8).with_seed(4),
        )
        .unwrap();
        // perturb weights so we are not saving the pristine init
        for e in model.store.entries.iter_mut() {
            e.value.mapv_inplace(|v| v * 1.01 + 0.001);
            e.m.fill(0.25);
            e.v.fill(0.5);
        }
        let mut adam = Adam::new(2e-4);
        adam.step_count = 17;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rdck");
        save_checkpoint(&model, Some(&adam), &path).unwrap();
        let (loaded, resume) = load_checkpoint(&path).unwrap();
        assert_eq!(resume.adam_steps, 17);
        assert!(resume.has_moments);
        assert_eq!(loaded.config, model.config);
        for (a, b) in loaded.store.entries.iter().zip(model.store.entries.iter()) {
            assert_eq!(a.value, b.value, "param {} drifted", b.name);
            assert_eq!(a.m, b.m);
            assert_eq!(a.v, b.v);
        }

        // identical compressed output from the reloaded model
        let img = Array3::from_shape_fn((3, 64, 64), |(c, y, x)| {
            ((c + y + x) % 17) as f32 / 17.0
        });
        let s1 = crate::codec::compress_to_stream(&model, &img, 1.0).unwrap();
        let s2 = crate::codec::compress_to_stream(&loaded, &img, 1.0).unwrap();
        assert_eq!(s1.stream.to_bytes(), s2.stream.to_bytes());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.rdck");
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));

        let model = CodecModel::new(
            ModelConfig::toy("baseline_conv", ContextKind::Hyperprior, 8, 80, 8),
        )
        .unwrap();
        let good = dir.path().join("good.rdck");
        save_checkpoint(&model, None, &good).unwrap();
        let full = std::fs::read(&good).unwrap();
        std::fs::write(&good, &full[..full.len() - 100]).unwrap();
        assert!(matches!(load_checkpoint(&good), Err(CheckpointError::Corrupt(_))));
    }
}
