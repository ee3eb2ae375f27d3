//! Binary model files: `magic | version:u8 | t:u8 | signs:i8×t (generator only)
//! | header_len:u32 | header:u32×header_len | f32 payload`, all little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamSet;

pub const VERSION: u8 = 1;
pub const MAGIC_MATCHER: &[u8] = b"UUNET-DA\0";
pub const MAGIC_GENERATOR: &[u8] = b"UUNET-GEN\0";
pub const MAGIC_CRITIC: &[u8] = b"UUNET-DF\0";

/// Decoded file prefix; `payload` holds the raw weight bytes.
#[derive(Debug)]
pub(crate) struct RawCheckpoint {
    pub t: usize,
    pub signs: Vec<i8>,
    pub header: Vec<u32>,
    pub payload: Vec<u8>,
}

/// Everything before the weight payload.
pub(crate) fn prefix(magic: &[u8], t: usize, signs: &[i8], header: &[u32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.push(VERSION);
    out.push(t as u8);
    out.extend(signs.iter().map(|&s| s as u8));
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    for h in header {
        out.extend_from_slice(&h.to_le_bytes());
    }
    out
}

/// SHA-256 of the prefix: identifies architecture, label count and sign
/// vector, not the weights.
pub(crate) fn fingerprint(prefix: &[u8]) -> String {
    hex(&Sha256::digest(prefix))
}

pub(crate) fn encode(magic: &[u8], t: usize, signs: &[i8], header: &[u32], params: &[&ParamSet]) -> Vec<u8> {
    let mut out = prefix(magic, t, signs, header);
    for p in params {
        p.write_le(&mut out);
    }
    out
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read(path: &Path, magic: &[u8], with_signs: bool) -> Result<RawCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes, magic, with_signs)
}

pub(crate) fn decode(path: &Path, bytes: &[u8], magic: &[u8], with_signs: bool) -> Result<RawCheckpoint> {
    let bad = |reason: &str| Error::checkpoint(path, reason);
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(bad("wrong magic header"));
    }
    let mut pos = magic.len();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let s = &bytes[*pos..end];
        *pos = end;
        Ok(s)
    };
    let version = take(&mut pos, 1)?[0];
    if version != VERSION {
        return Err(Error::checkpoint(path, format!("unsupported format version {version}")));
    }
    let t = take(&mut pos, 1)?[0] as usize;
    let signs = if with_signs {
        take(&mut pos, t)?.iter().map(|&b| b as i8).collect()
    } else {
        Vec::new()
    };
    let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    if len > 64 {
        return Err(bad("implausible architecture header length"));
    }
    let header = take(&mut pos, len * 4)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(RawCheckpoint {
        t,
        signs,
        header,
        payload: bytes[pos..].to_vec(),
    })
}

/// Fills `params` in order from `payload`, requiring an exact length match.
pub(crate) fn load_params(path: &Path, payload: &[u8], params: &mut [&mut ParamSet]) -> Result<()> {
    let expected: usize = params.iter().map(|p| p.scalar_count() * 4).sum();
    if payload.len() != expected {
        return Err(Error::checkpoint(
            path,
            format!("weight payload is {} bytes, architecture needs {expected}", payload.len()),
        ));
    }
    let mut offset = 0;
    for p in params.iter_mut() {
        offset += p.read_le(&payload[offset..]).expect("length checked above");
    }
    Ok(())
}

pub(crate) fn check_t(path: &Path, found: usize, expected: Option<usize>) -> Result<()> {
    match expected {
        Some(t) if t != found => Err(Error::checkpoint(
            path,
            format!("checkpoint was trained with t={found}, configuration expects t={t}"),
        )),
        _ => Ok(()),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
