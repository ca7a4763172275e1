//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//! - 4 magic bytes `ADPT`
//! - `u32` format version (currently 1)
//! - `u64` header length, then that many bytes of JSON
//!   (`{"config": DetectorConfig, "dual_bank": bool}`)
//! - per parameter, in the fixed declaration order of
//!   [`ModelWeights::params`]: `u64` name length, name bytes, `u64` rank,
//!   `u64` per dimension, then `f64` values
//!
//! Round-tripping is bit-exact: values are stored as raw IEEE-754 bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DetectorConfig, ModelWeights};
use crate::error::{CoreError, Result};

const MAGIC: &[u8; 4] = b"ADPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: DetectorConfig,
    dual_bank: bool,
}

pub fn save(weights: &ModelWeights, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| CoreError::io(path.display().to_string(), e);

    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let header = serde_json::to_vec(&Header {
        config: weights.config.clone(),
        dual_bank: weights.dual_bank(),
    })
    .map_err(|e| CoreError::format("checkpoint header", e.to_string()))?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&header).map_err(io_err)?;

    for (name, t) in weights.params() {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u64).to_le_bytes()).map_err(io_err)?;
        w.write_all(nb).map_err(io_err)?;
        let shape = t.shape();
        w.write_all(&(shape.len() as u64).to_le_bytes()).map_err(io_err)?;
        for d in &shape {
            w.write_all(&(*d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for v in t.data_ref().iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn load(path: &Path, requires_grad: bool) -> Result<ModelWeights> {
    let file = File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| CoreError::io(path.display().to_string(), e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(CoreError::format(
            "checkpoint",
            format!("{}: bad magic bytes {magic:?}", path.display()),
        ));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver).map_err(io_err)?;
    let ver = u32::from_le_bytes(ver);
    if ver != VERSION {
        return Err(CoreError::format(
            "checkpoint",
            format!("{}: unsupported version {ver}", path.display()),
        ));
    }
    let hlen = read_u64(&mut r, path)? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf).map_err(io_err)?;
    let header: Header = serde_json::from_slice(&hbuf)
        .map_err(|e| CoreError::format("checkpoint header", e.to_string()))?;

    let weights = ModelWeights::zeros(&header.config, header.dual_bank, requires_grad)?;
    for (name, t) in weights.params() {
        let nlen = read_u64(&mut r, path)? as usize;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf).map_err(io_err)?;
        let got = String::from_utf8_lossy(&nbuf);
        if got != name {
            return Err(CoreError::format(
                "checkpoint",
                format!("{}: parameter order mismatch, expected {name}, found {got}", path.display()),
            ));
        }
        let rank = read_u64(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        if shape != t.shape() {
            return Err(CoreError::format(
                "checkpoint",
                format!("{}: shape mismatch for {name}: {shape:?} vs {:?}", path.display(), t.shape()),
            ));
        }
        let mut data = vec![0.0f64; t.numel()];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf).map_err(io_err)?;
            *v = f64::from_le_bytes(buf);
        }
        t.set_data(&data)?;
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing).map_err(io_err)? {
        0 => Ok(weights),
        _ => Err(CoreError::format(
            "checkpoint",
            format!("{}: trailing bytes after parameters", path.display()),
        )),
    }
}

/// Hex SHA-256 of a file; identifies teacher checkpoints in provenance logs.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}
