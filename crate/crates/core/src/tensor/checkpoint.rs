//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "ACGN" | version | entry count
//! per entry: name length | UTF-8 name | rank | dims… | payload
//! ```
//!
//! Tensor payloads are raw little-endian `f32`. The first entry is always the
//! metadata block named `__config__`: rank 1, its single dim is the byte
//! length, and the payload is UTF-8 JSON instead of floats.

use std::io::{Read, Write};

use super::{Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACGN";
pub const CHECKPOINT_VERSION: u32 = 1;
const CONFIG_NAME: &str = "__config__";

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn get_bytes<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn put_name<W: Write>(w: &mut W, name: &str) -> Result<()> {
    put_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(w: &mut W, config_json: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    if tensors.iter().any(|(n, _)| n == CONFIG_NAME) {
        return Err(TensorError::Checkpoint(format!("`{CONFIG_NAME}` is reserved")));
    }
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_u32(w, tensors.len() as u32 + 1)?;

    put_name(w, CONFIG_NAME)?;
    put_u32(w, 1)?;
    put_u32(w, config_json.len() as u32)?;
    w.write_all(config_json.as_bytes())?;

    for (name, t) in tensors {
        put_name(w, name)?;
        put_u32(w, t.rank() as u32)?;
        for &d in t.shape() {
            put_u32(w, d as u32)?;
        }
        let mut payload = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

/// Returns the metadata JSON and the tensors in file order.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(String, Vec<(String, Tensor)>)> {
    let magic = get_bytes(r, 4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = get_u32(r)? as usize;
    let mut config = None;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = get_u32(r)? as usize;
        let name = String::from_utf8(get_bytes(r, name_len)?)
            .map_err(|e| TensorError::Checkpoint(format!("entry name: {e}")))?;
        let rank = get_u32(r)? as usize;
        let dims = (0..rank).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name == CONFIG_NAME {
            if rank != 1 {
                return Err(TensorError::Checkpoint("config block must be rank 1".into()));
            }
            let json = String::from_utf8(get_bytes(r, dims[0])?)
                .map_err(|e| TensorError::Checkpoint(format!("config block: {e}")))?;
            config = Some(json);
            continue;
        }
        let numel: usize = dims.iter().product();
        let raw = get_bytes(r, numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push((name, Tensor::new(dims, data)?));
    }
    let config = config.ok_or_else(|| TensorError::Checkpoint(format!("missing `{CONFIG_NAME}` block")))?;
    Ok((config, tensors))
}
