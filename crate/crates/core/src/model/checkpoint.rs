//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, a JSON
//! header (metadata plus tensor names/shapes in payload order), then the
//! raw little-endian f32 payload. Tensor bits round-trip exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};

use super::ModelError;

const MAGIC: &[u8; 8] = b"FSEGCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `meta` plus named tensors to `path`.
pub fn write_container(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, ArrayViewD<'_, f32>)],
) -> Result<(), ModelError> {
    let header = Header {
        dtype: "f32".to_string(),
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, view)| TensorMeta {
                name: name.clone(),
                shape: view.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| ModelError::CheckpointFormat {
            reason: format!("header encode: {e}"),
        })?;

    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    out.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    out.write_all(&VERSION.to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    out.write_all(&header_bytes).map_err(|e| io_err(path, e))?;
    let mut buf = Vec::new();
    for (_, view) in tensors {
        buf.clear();
        buf.reserve(view.len() * 4);
        for v in view.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Read a container back as `(meta, name -> tensor)`.
pub fn read_container(
    path: &Path,
) -> Result<(serde_json::Value, BTreeMap<String, ArrayD<f32>>), ModelError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut input = std::io::BufReader::new(file);

    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(ModelError::CheckpointFormat {
            reason: "bad magic".to_string(),
        });
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word).map_err(|e| io_err(path, e))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(ModelError::CheckpointFormat {
            reason: format!("unsupported version {version}"),
        });
    }
    let mut long = [0u8; 8];
    input.read_exact(&mut long).map_err(|e| io_err(path, e))?;
    let header_len = u64::from_le_bytes(long) as usize;
    let mut header_bytes = vec![0u8; header_len];
    input
        .read_exact(&mut header_bytes)
        .map_err(|e| io_err(path, e))?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| ModelError::CheckpointFormat {
            reason: format!("header decode: {e}"),
        })?;
    if header.dtype != "f32" {
        return Err(ModelError::CheckpointFormat {
            reason: format!("unsupported dtype {}", header.dtype),
        });
    }

    let mut tensors = BTreeMap::new();
    for meta in &header.tensors {
        let len: usize = meta.shape.iter().product();
        let mut bytes = vec![0u8; len * 4];
        input.read_exact(&mut bytes).map_err(|e| io_err(path, e))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&meta.shape), values).map_err(|e| {
            ModelError::CheckpointFormat {
                reason: format!("tensor {}: {e}", meta.name),
            }
        })?;
        tensors.insert(meta.name.clone(), tensor);
    }
    Ok((header.meta, tensors))
}
