//! `.mamt` token files and JSON fusion-state files.
//!
//! `.mamt` layout, all little-endian:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `MAMT`                  |
//! | 4      | 2    | version, u16 = 1              |
//! | 6      | 1    | dtype, 0 = f32 / 1 = f64      |
//! | 7      | 1    | reserved, 0                   |
//! | 8      | 4    | B, u32                        |
//! | 12     | 4    | L, u32                        |
//! | 16     | 4    | d, u32                        |
//! | 20     | 4    | l_spec, u32                   |
//! | 24     | ...  | B·L·d values, row-major       |

use std::fs;
use std::path::{Path, PathBuf};

use mame_core::{FusionState, TokenMatrix};

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MAMT";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Default stabilizer for computations whose results are stored at this
    /// precision.
    pub fn default_epsilon(self) -> f64 {
        match self {
            DType::F32 => mame_core::SimilarityConfig::EPSILON_F32,
            DType::F64 => mame_core::SimilarityConfig::EPSILON_F64,
        }
    }
}

/// Serializes `t`. f32 output rounds each value to nearest.
pub fn encode_tokens(t: &TokenMatrix, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.as_slice().len() * dtype.size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(0);
    for v in [t.batch(), t.length(), t.dim(), t.l_spec()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    match dtype {
        DType::F32 => t
            .as_slice()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .as_slice()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

/// Failure while decoding, located by byte offset.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeError {
    pub offset: u64,
    pub reason: String,
}

fn bad(offset: usize, reason: impl Into<String>) -> DecodeError {
    DecodeError {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn decode_tokens(bytes: &[u8]) -> std::result::Result<(TokenMatrix, DType), DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(bad(
            bytes.len(),
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if bytes[0..4] != MAGIC {
        return Err(bad(
            0,
            format!(
                "bad magic {:?}, expected \"MAMT\"",
                String::from_utf8_lossy(&bytes[0..4])
            ),
        ));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(4, format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(bytes[6])
        .ok_or_else(|| bad(6, format!("unknown dtype code {}", bytes[6])))?;
    if bytes[7] != 0 {
        return Err(bad(7, format!("reserved byte is {}, expected 0", bytes[7])));
    }
    let field = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (batch, length, dim, l_spec) = (field(8), field(12), field(16), field(20));
    if batch == 0 || length == 0 || dim == 0 {
        return Err(bad(8, format!("empty shape {batch}x{length}x{dim}")));
    }
    if l_spec >= length {
        return Err(bad(
            20,
            format!("l_spec {l_spec} must be smaller than L {length}"),
        ));
    }
    let count = batch
        .checked_mul(length)
        .and_then(|c| c.checked_mul(dim))
        .ok_or_else(|| bad(8, "shape overflows"))?;
    let size = dtype.size();
    let payload = &bytes[HEADER_LEN..];
    let expected = count * size;
    if payload.len() < expected {
        return Err(bad(
            bytes.len(),
            format!(
                "truncated payload: {} values expected, {} bytes present",
                count,
                payload.len()
            ),
        ));
    }
    if payload.len() > expected {
        return Err(bad(
            HEADER_LEN + expected,
            format!("{} trailing bytes", payload.len() - expected),
        ));
    }
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(bad(
            HEADER_LEN + i * size,
            format!("non-finite value {}", data[i]),
        ));
    }
    let t =
        TokenMatrix::new(batch, length, dim, l_spec, data).map_err(|e| bad(8, e.to_string()))?;
    Ok((t, dtype))
}

pub fn write_tokens(t: &TokenMatrix, path: &Path, dtype: DType) -> Result<()> {
    fs::write(path, encode_tokens(t, dtype)).map_err(|source| Error::Write {
        path: path.into(),
        source,
    })
}

/// Reads a token file along with the precision it was stored at.
pub fn read_tokens_with_dtype(path: &Path) -> Result<(TokenMatrix, DType)> {
    let bytes = fs::read(path).map_err(|source| Error::Read {
        path: path.into(),
        source,
    })?;
    decode_tokens(&bytes).map_err(|e| Error::Format {
        path: path.into(),
        offset: e.offset,
        reason: e.reason,
    })
}

pub fn read_tokens(path: &Path) -> Result<TokenMatrix> {
    read_tokens_with_dtype(path).map(|(t, _)| t)
}

/// Validates and writes the state as compact JSON (one line).
pub fn write_fusion_state(state: &FusionState, path: &Path) -> Result<()> {
    state.validate().map_err(|source| Error::State {
        path: path.into(),
        source,
    })?;
    let mut json = serde_json::to_vec(state).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    json.push(b'\n');
    fs::write(path, json).map_err(|source| Error::Write {
        path: path.into(),
        source,
    })
}

pub fn read_fusion_state(path: &Path) -> Result<FusionState> {
    let bytes = fs::read(path).map_err(|source| Error::Read {
        path: path.into(),
        source,
    })?;
    parse_fusion_state(&bytes, path)
}

pub fn parse_fusion_state(bytes: &[u8], path: &Path) -> Result<FusionState> {
    let state: FusionState = serde_json::from_slice(bytes).map_err(|source| Error::Json {
        path: PathBuf::from(path),
        source,
    })?;
    state.validate().map_err(|source| Error::State {
        path: path.into(),
        source,
    })?;
    Ok(state)
}
