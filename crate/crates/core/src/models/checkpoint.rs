//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "SEGKDCKP"
//! version     u32
//! header_len  u32
//! header      header_len bytes of JSON {name, trainable, param_count, config}
//! params      param_count × f64
//! trailer     8 bytes  "CKPT_END"
//! ```
//!
//! Parameters are stored as raw IEEE-754 bits, so a round trip is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ReferenceNet, ReferenceNetConfig, SegmentationModel, TrainableModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEGKDCKP";
const TRAILER: &[u8; 8] = b"CKPT_END";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    trainable: bool,
    param_count: usize,
    config: ReferenceNetConfig,
}

pub fn save_checkpoint(net: &ReferenceNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = serde_json::to_vec(&Header {
        name: net.name().to_string(),
        trainable: net.trainable(),
        param_count: net.parameter_count(),
        config: net.config().clone(),
    })?;
    let mut buf = Vec::with_capacity(24 + header.len() + 8 * net.parameter_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for p in net.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    buf.extend_from_slice(TRAILER);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ReferenceNet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |detail: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_end = 16 + header_len;
    if bytes.len() < header_end {
        return Err(corrupt(format!(
            "truncated header ({} of {header_len} bytes)",
            bytes.len() - 16
        )));
    }
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let params_end = header_end + 8 * header.param_count;
    if bytes.len() != params_end + TRAILER.len() {
        return Err(corrupt(format!(
            "expected {} bytes for {} parameters, file has {}",
            params_end + TRAILER.len(),
            header.param_count,
            bytes.len()
        )));
    }
    if &bytes[params_end..] != TRAILER {
        return Err(corrupt("missing trailer".into()));
    }
    let params = bytes[header_end..params_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ReferenceNet::from_parts(header.name, header.config, params, header.trainable).map_err(|e| corrupt(e.to_string()))
}
