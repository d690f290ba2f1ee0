//! IDX container (the MNIST family format): big-endian magic
//! `0x0000_08NN` where `NN` is the number of dimensions, then one big-endian
//! `u32` per dimension, then unsigned bytes in row-major order.

use std::path::Path;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("idx parse error at byte {offset}: {msg}")]
pub struct IdxError {
    pub offset: usize,
    pub msg: String,
}

fn err(offset: usize, msg: impl Into<String>) -> IdxError {
    IdxError { offset, msg: msg.into() }
}

/// Decoded IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| err(bytes.len(), format!("truncated header, needed 4 bytes at {at}")))
}

/// Parses an unsigned-byte IDX array with 1 (labels) or 3 (images)
/// dimensions.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, IdxError> {
    let magic = read_u32(bytes, 0)?;
    let rank = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        _ => return Err(err(0, format!("bad magic {magic:#010x}"))),
    };
    let mut dims = Vec::with_capacity(rank);
    for k in 0..rank {
        dims.push(read_u32(bytes, 4 + 4 * k)? as usize);
    }
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let end = start + len;
    if bytes.len() < end {
        return Err(err(bytes.len(), format!("truncated data, expected {end} bytes")));
    }
    if bytes.len() > end {
        return Err(err(end, format!("{} trailing bytes", bytes.len() - end)));
    }
    Ok(IdxArray {
        dims,
        data: bytes[start..end].to_vec(),
    })
}

pub fn encode_idx(arr: &IdxArray) -> Vec<u8> {
    let magic = if arr.dims.len() == 1 { LABELS_MAGIC } else { IMAGES_MAGIC };
    let mut out = magic.to_be_bytes().to_vec();
    for &d in &arr.dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend(&arr.data);
    out
}

#[derive(Debug, thiserror::Error)]
pub enum IdxFileError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: IdxError },
}

pub fn load_idx(path: &Path) -> Result<IdxArray, IdxFileError> {
    let bytes = std::fs::read(path).map_err(|source| IdxFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_idx(&bytes).map_err(|source| IdxFileError::Parse {
        path: path.display().to_string(),
        source,
    })
}
