//! Parameter checkpoint file.
//!
//! ```text
//! [u8; 8]  magic "SFUSECKP"
//! u32      format version
//! u32      header length
//! [u8]     header, UTF-8 JSON
//! f32[..]  tensor data in header order, little-endian
//! u32      crc32 of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FusionError;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SFUSECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    /// Free-form architecture descriptor owned by the caller.
    pub architecture: serde_json::Value,
    pub seed: u64,
    pub tensors: Vec<TensorMeta>,
    /// Path of the run manifest that produced this checkpoint.
    #[serde(default)]
    pub manifest: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: serde_json::Value,
    pub seed: u64,
    pub manifest: Option<String>,
    pub tensors: Vec<Tensor<f32>>,
}

fn bad(msg: impl Into<String>) -> FusionError {
    FusionError::Checkpoint(msg.into())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let header = CheckpointHeader {
        architecture: ckpt.architecture.clone(),
        seed: ckpt.seed,
        tensors: ckpt
            .tensors
            .iter()
            .map(|t| TensorMeta {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        manifest: ckpt.manifest.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + 4 * ckpt.tensors.iter().map(Tensor::len).sum::<usize>());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in &ckpt.tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, FusionError> {
    if bytes.len() < 20 {
        return Err(bad("file too short"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (content, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(content) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(bad("checksum mismatch"));
    }
    let version = u32::from_le_bytes(content[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let header_len = u32::from_le_bytes(content[12..16].try_into().unwrap()) as usize;
    let header_bytes = content
        .get(16..16usize.saturating_add(header_len))
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| bad(format!("header: {e}")))?;
    let mut data = &content[16 + header_len..];
    let mut tensors = Vec::with_capacity(header.tensors.len().min(1024));
    for meta in header.tensors {
        let len = meta
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad(format!("tensor `{}` shape overflows", meta.name)))?;
        if data.len() < len {
            return Err(bad(format!("tensor `{}` is truncated", meta.name)));
        }
        let (chunk, rest) = data.split_at(len);
        data = rest;
        tensors.push(Tensor {
            name: meta.name,
            shape: meta.shape,
            data: chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        });
    }
    if !data.is_empty() {
        return Err(bad("trailing tensor data"));
    }
    Ok(Checkpoint {
        architecture: header.architecture,
        seed: header.seed,
        manifest: header.manifest,
        tensors,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), FusionError> {
    let io = |source| FusionError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_checkpoint(ckpt)).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, FusionError> {
    let bytes = std::fs::read(path).map_err(|source| FusionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            architecture: serde_json::json!({"kind": "mlp", "classes": 3}),
            seed: 42,
            manifest: Some("run.json".into()),
            tensors: vec![
                Tensor {
                    name: "a".into(),
                    shape: vec![2, 2],
                    data: vec![1.0, -0.0, f32::MIN_POSITIVE / 4.0, f32::MAX],
                },
                Tensor {
                    name: "b".into(),
                    shape: vec![1],
                    data: vec![0.5],
                },
            ],
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let bytes = encode_checkpoint(&c);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.architecture, c.architecture);
        assert_eq!(back.manifest, c.manifest);
        for (a, b) in back.tensors.iter().zip(&c.tensors) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn any_flipped_byte_is_rejected() {
        let bytes = encode_checkpoint(&sample());
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            assert!(decode_checkpoint(&b).is_err(), "byte {i}");
        }
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }
}
