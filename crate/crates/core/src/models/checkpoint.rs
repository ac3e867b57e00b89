//! Binary checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "GNLCKPT1"
//! 8       4     u32 LE: byte length L of the spec document
//! 12      L     ModelSpec as UTF-8 JSON
//! 12+L    8     u64 LE: parameter count P
//! 20+L    8*P   parameters as f64 LE, layout order
//! ```
//!
//! Nothing may follow the parameters. Values round-trip bit for bit.

use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::{ModelError, ModelInstance, ModelSpec, ParamLayout, ParamVector};

pub const MAGIC: &[u8; 8] = b"GNLCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint has trailing bytes")]
    TrailingBytes,
    #[error("bad spec document: {0}")]
    Spec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn encode(model: &ModelInstance) -> Vec<u8> {
    let spec = serde_json::to_vec(&model.spec).expect("spec serializes");
    let mut out = Vec::with_capacity(20 + spec.len() + 8 * model.params.len());
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(spec.len() as u32).unwrap();
    out.extend_from_slice(&spec);
    out.write_u64::<LittleEndian>(model.params.len() as u64).unwrap();
    for &v in model.params.iter() {
        out.write_f64::<LittleEndian>(v).unwrap();
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ModelInstance, CheckpointError> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let spec_len = cur.read_u32::<LittleEndian>().map_err(|_| CheckpointError::Truncated)? as usize;
    let mut spec = vec![0u8; spec_len];
    cur.read_exact(&mut spec).map_err(|_| CheckpointError::Truncated)?;
    let spec: ModelSpec = serde_json::from_slice(&spec).map_err(|e| CheckpointError::Spec(e.to_string()))?;
    let count = cur.read_u64::<LittleEndian>().map_err(|_| CheckpointError::Truncated)? as usize;
    ParamLayout::new(&spec)?.check_len(count)?;
    let remaining = bytes.len() - cur.position() as usize;
    if remaining < count * 8 {
        return Err(CheckpointError::Truncated);
    }
    if remaining > count * 8 {
        return Err(CheckpointError::TrailingBytes);
    }
    let mut params = vec![0.0; count];
    cur.read_f64_into::<LittleEndian>(&mut params)
        .map_err(|_| CheckpointError::Truncated)?;
    Ok(ModelInstance::new(spec, ParamVector::new(params))?)
}

pub fn save(path: &Path, model: &ModelInstance) -> Result<(), CheckpointError> {
    fs::write(path, encode(model)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<ModelInstance, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}
