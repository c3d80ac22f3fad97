//! Binary params file.
//!
//! Layout (all integers little-endian):
//! `"CDVS"`, `u16` version, `u8` endianness flag (1 = little-endian),
//! seven `u32` config fields (`d_in, d_model, n_heads, d_ff, n_layers,
//! seed_lo, seed_hi`), every tensor as raw `f64` in canonical order, then a
//! CRC32C of everything before it.

use std::path::Path;

use super::params::{SelectorConfig, SelectorParams};
use super::SelectorError;
use crate::fsutil::write_atomic;

pub const PARAMS_MAGIC: &[u8; 4] = b"CDVS";
pub const PARAMS_VERSION: u16 = 1;
const LITTLE_ENDIAN: u8 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 7 * 4;

pub fn write_params(params: &SelectorParams) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::with_capacity(HEADER_LEN + params.param_count() * 8 + 4);
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.push(LITTLE_ENDIAN);
    for field in [
        c.d_in as u32,
        c.d_model as u32,
        c.n_heads as u32,
        c.d_ff as u32,
        c.n_layers as u32,
        c.seed as u32,
        (c.seed >> 32) as u32,
    ] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    for (_, tensor) in params.tensors() {
        for v in tensor {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32c::crc32c(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

pub fn read_params(bytes: &[u8]) -> Result<SelectorParams, SelectorError> {
    if bytes.len() < 7 {
        return Err(SelectorError::CorruptChecksum);
    }
    if &bytes[..4] != PARAMS_MAGIC {
        return Err(SelectorError::FormatVersionMismatch("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PARAMS_VERSION {
        return Err(SelectorError::FormatVersionMismatch(format!(
            "version {version}, expected {PARAMS_VERSION}"
        )));
    }
    if bytes[6] != LITTLE_ENDIAN {
        return Err(SelectorError::FormatVersionMismatch(format!(
            "endianness flag {}, expected little-endian",
            bytes[6]
        )));
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(SelectorError::CorruptChecksum);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32c::crc32c(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
        return Err(SelectorError::CorruptChecksum);
    }

    let field = |i: usize| u32_at(body, 7 + 4 * i);
    let config = SelectorConfig {
        d_in: field(0) as usize,
        d_model: field(1) as usize,
        n_heads: field(2) as usize,
        d_ff: field(3) as usize,
        n_layers: field(4) as usize,
        seed: field(5) as u64 | ((field(6) as u64) << 32),
    };
    config.validate().map_err(SelectorError::InvalidConfig)?;
    let expected = config.param_count();
    if body.len() != HEADER_LEN + expected * 8 {
        return Err(SelectorError::FormatVersionMismatch(format!(
            "payload holds {} bytes, config implies {}",
            body.len() - HEADER_LEN,
            expected * 8
        )));
    }

    let mut params = SelectorParams::zeros(config);
    let mut chunks = body[HEADER_LEN..].chunks_exact(8);
    for (_, tensor) in params.tensors_mut() {
        for v in tensor.iter_mut() {
            let chunk = chunks.next().expect("length checked");
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    Ok(params)
}

pub fn save_params(params: &SelectorParams, path: &Path) -> Result<(), SelectorError> {
    write_atomic(path, &write_params(params))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<SelectorParams, SelectorError> {
    read_params(&std::fs::read(path)?)
}
