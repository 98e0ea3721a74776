//! Shared binary framing for container files and run manifests.
//!
//! Container files start with a 16-byte header (8-byte magic, `u32` version,
//! `u32` reserved) followed by records framed as
//! `[u64 payload length][payload][u32 CRC-32 of payload]`, little-endian.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 16;

pub fn write_header(out: &mut Vec<u8>, magic: &[u8; 8], version: u32) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
}

pub fn frame_record(out: &mut Vec<u8>, payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
}

/// Walks the framed records of a container after validating its header.
pub struct RecordReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> RecordReader<'a> {
    pub fn new(bytes: &'a [u8], magic: &[u8; 8], what: &'static str, version: u32) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            if !magic.starts_with(&bytes[..bytes.len().min(8)]) {
                return Err(Error::Magic(what));
            }
            return Err(Error::Truncated(format!("{what} header is {} bytes", bytes.len())));
        }
        if &bytes[..8] != magic {
            return Err(Error::Magic(what));
        }
        let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if found != version {
            return Err(Error::Version { found, expected: version });
        }
        Ok(Self { bytes, pos: HEADER_LEN, what })
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn next_record(&mut self, context: &str) -> Result<&'a [u8]> {
        let rest = &self.bytes[self.pos..];
        if rest.len() < 8 {
            return Err(Error::Truncated(format!("{}: {context} record length missing", self.what)));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes"));
        let len = usize::try_from(len)
            .ok()
            .filter(|&l| l <= rest.len().saturating_sub(12))
            .ok_or_else(|| Error::Truncated(format!("{}: {context} record shorter than its stated {len} bytes", self.what)))?;
        let payload = &rest[8..8 + len];
        let stored = u32::from_le_bytes(rest[8 + len..12 + len].try_into().expect("4 bytes"));
        if crc32fast::hash(payload) != stored {
            return Err(Error::Checksum(format!("{}: {context} record", self.what)));
        }
        self.pos += 12 + len;
        Ok(payload)
    }

    pub fn finish(self) -> Result<()> {
        if self.at_end() {
            Ok(())
        } else {
            Err(Error::Format(format!("{}: {} trailing bytes", self.what, self.bytes.len() - self.pos)))
        }
    }
}

/// Cursor over one record payload. Payload checksums already passed, so
/// running out of bytes here means a malformed writer, reported as a format error.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("{} record ends early", self.what)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// `u32` length-prefixed UTF-8.
    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{}: invalid UTF-8 string", self.what)))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} record has {} unread bytes", self.what, self.bytes.len() - self.pos)))
        }
    }
}

pub fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Provenance written next to every produced artifact as `<artifact>.manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Full command line that produced the artifact.
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    /// Input path to content hash.
    pub inputs: Vec<(String, String)>,
    pub output: String,
    pub output_hash: String,
    #[serde(default)]
    pub wall_time_secs: f64,
    pub crate_version: String,
}

impl Manifest {
    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        artifact.with_file_name(name)
    }

    pub fn write(&self, artifact: &Path) -> Result<PathBuf> {
        let path = Self::path_for(artifact);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
