//! Checkpoint layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `RDISCKPT` |
//! | 4     | format version (`u32`) |
//! | 8     | header length `h` (`u64`) |
//! | h     | UTF-8 JSON [`Architecture`] |
//! | 8     | parameter count `n` (`u64`) |
//! | 8·n   | parameters as `f64`, layer order, weights before biases |
//! | 8     | FNV-1a 64 hash of every preceding byte |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::{Architecture, Model};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RDISCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint(model: &Model, mut out: impl Write) -> Result<()> {
    let header = serde_json::to_vec(model.architecture()).map_err(|e| ckpt_err(e.to_string()))?;
    let params = model.flat_parameters();
    let mut buf = Vec::with_capacity(40 + header.len() + 8 * params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in &params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let hash = fnv1a(&buf);
    buf.extend_from_slice(&hash.to_le_bytes());
    out.write_all(&buf).map_err(|e| ckpt_err(e.to_string()))
}

pub fn read_checkpoint(mut input: impl Read) -> Result<Model> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf).map_err(|e| ckpt_err(e.to_string()))?;
    if buf.len() < 36 {
        return Err(ckpt_err("file too short"));
    }
    if &buf[..8] != CHECKPOINT_MAGIC {
        return Err(ckpt_err("bad magic"));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(ckpt_err("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(format!("unsupported version {version}")));
    }
    let mut at = 12;
    let take_u64 = |at: &mut usize| -> Result<u64> {
        let bytes = body.get(*at..*at + 8).ok_or_else(|| ckpt_err("truncated"))?;
        *at += 8;
        Ok(u64::from_le_bytes(bytes.try_into().expect("8 bytes")))
    };
    let header_len = take_u64(&mut at)? as usize;
    let header = body
        .get(at..at.saturating_add(header_len))
        .ok_or_else(|| ckpt_err("truncated header"))?;
    at += header_len;
    let arch: Architecture = serde_json::from_slice(header).map_err(|e| ckpt_err(format!("header: {e}")))?;
    let count = take_u64(&mut at)? as usize;
    let payload = &body[at..];
    if payload.len() != count.saturating_mul(8) {
        return Err(ckpt_err(format!(
            "expected {count} parameters, found {} bytes",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut model = Model::zeros(arch)?;
    model
        .set_flat_parameters(&values)
        .map_err(|e| ckpt_err(e.to_string()))?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush().map_err(|e| ckpt_err(e.to_string()))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
    read_checkpoint(BufReader::new(file))
}
