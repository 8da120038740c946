//! Binary container shared by datasets, checkpoints and reconstructions.
//!
//! Layout: 8-byte magic, `u64` little-endian header length, UTF-8 JSON header,
//! then the payload as little-endian `f64` values. The header always records
//! the payload size in bytes so truncation is detected before any parsing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

pub const MAGIC: &[u8; 8] = b"SMUGBIN\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope<T> {
    format_version: u32,
    kind: String,
    payload_bytes: u64,
    meta: T,
}

/// Metadata read from a container without touching its payload.
#[derive(Clone, Debug)]
pub struct ContainerHeader<T> {
    pub kind: String,
    pub meta: T,
    /// Byte offset at which the payload starts.
    pub payload_offset: u64,
    pub payload_bytes: u64,
}

pub fn write_container<T: Serialize>(
    path: impl AsRef<Path>,
    kind: &str,
    meta: &T,
    payload: &[f64],
) -> Result<()> {
    let path = path.as_ref();
    let envelope = Envelope {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        payload_bytes: (payload.len() * 8) as u64,
        meta,
    };
    let header = serde_json::to_vec(&envelope)?;
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for v in payload {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| CoreError::io(path, e))
}

/// Parses magic and header from `reader`, leaving it positioned at the payload.
pub fn read_header_from<T: DeserializeOwned>(
    reader: &mut impl Read,
    path: &Path,
    expected_kind: &str,
) -> Result<ContainerHeader<T>> {
    let format = |message: String| CoreError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut magic = [0u8; 8];
    reader
        .read_exact(&mut magic)
        .map_err(|_| format("file too short for container magic".into()))?;
    if &magic != MAGIC {
        return Err(format("not a container file (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    reader
        .read_exact(&mut len)
        .map_err(|_| format("file too short for header length".into()))?;
    let header_len = u64::from_le_bytes(len);
    let mut header = Vec::new();
    reader
        .take(header_len)
        .read_to_end(&mut header)
        .map_err(|e| CoreError::io(path, e))?;
    if header.len() as u64 != header_len {
        return Err(format(format!(
            "header truncated: declares {header_len} bytes, found {}",
            header.len()
        )));
    }
    let envelope: Envelope<T> =
        serde_json::from_slice(&header).map_err(|e| format(format!("corrupt header: {e}")))?;
    if envelope.format_version != FORMAT_VERSION {
        return Err(format(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            envelope.format_version
        )));
    }
    if envelope.kind != expected_kind {
        return Err(format(format!(
            "expected a {expected_kind} file, found {}",
            envelope.kind
        )));
    }
    Ok(ContainerHeader {
        kind: envelope.kind,
        meta: envelope.meta,
        payload_offset: 16 + header_len,
        payload_bytes: envelope.payload_bytes,
    })
}

/// Reads only the header; the payload is never read.
pub fn read_header<T: DeserializeOwned>(
    path: impl AsRef<Path>,
    expected_kind: &str,
) -> Result<ContainerHeader<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    read_header_from(&mut BufReader::new(file), path, expected_kind)
}

pub fn read_container<T: DeserializeOwned>(
    path: impl AsRef<Path>,
    expected_kind: &str,
) -> Result<(ContainerHeader<T>, Vec<f64>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let file_len = file.metadata().map_err(|e| CoreError::io(path, e))?.len();
    let mut reader = BufReader::new(file);
    let header = read_header_from::<T>(&mut reader, path, expected_kind)?;
    let actual = file_len.saturating_sub(header.payload_offset);
    if actual != header.payload_bytes || header.payload_bytes % 8 != 0 {
        return Err(CoreError::PayloadLength {
            path: path.to_path_buf(),
            expected: header.payload_bytes,
            actual,
        });
    }
    let mut bytes = Vec::with_capacity(actual as usize);
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| CoreError::io(path, e))?;
    let payload = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, payload))
}
