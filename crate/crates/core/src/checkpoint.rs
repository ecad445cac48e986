//! Versioned, hashed checkpoint files.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, 32-byte SHA-256
//! of the payload, little-endian `u64` payload length, bincode payload.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"IHMMCKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 32 + 8;

pub fn encode<T: Serialize>(state: &T) -> Result<Vec<u8>> {
    let payload = bincode::serialize(state).map_err(|e| Error::Data(format!("checkpoint encode: {e}")))?;
    let mut out = Vec::with_capacity(HEADER + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    if bytes.len() < HEADER {
        return Err(Error::CorruptCheckpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hash = &bytes[12..44];
    let len = u64::from_le_bytes(bytes[44..52].try_into().expect("8 bytes"));
    let payload = &bytes[HEADER..];
    if payload.len() as u64 != len {
        return Err(Error::CorruptCheckpoint(format!(
            "payload length {} does not match header {len}",
            payload.len()
        )));
    }
    if Sha256::digest(payload).as_slice() != hash {
        return Err(Error::CorruptCheckpoint("content hash mismatch".into()));
    }
    bincode::deserialize(payload).map_err(|e| Error::CorruptCheckpoint(format!("decode: {e}")))
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes the checkpoint to a temporary sibling and renames it into place.
pub fn save<T: Serialize>(path: &Path, state: &T) -> Result<()> {
    let bytes = encode(state)?;
    let tmp = temp_path(path);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    decode(&fs::read(path)?)
}
