//! Binary container for [`EmbeddingMatrix`].
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                                          |
//! |--------|------|------------------------------------------------|
//! | 0      | 8    | magic `b"IVIQEMB\0"`                           |
//! | 8      | 4    | format version, `1`                            |
//! | 12     | 4    | dimension `d`                                  |
//! | 16     | 4    | row count `n`                                  |
//! | 20     | var  | id table, `n` × (`u8` segment, `u16` len, id)  |
//! | ...    | 4·n·d| rows, `f32`, row-major, in id-table order      |
//! | end-8  | 8    | FNV-1a-64 of every preceding byte              |
//!
//! Segment codes: `0` whole, `1` first half, `2` second half.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::corpus::{CorpusError, EmbeddingMatrix, RowKey, Segment};
use crate::hashing::fnv1a64;

pub const MAGIC: &[u8; 8] = b"IVIQEMB\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
const CHECKSUM_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("index I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt index container: {0}")]
    Corrupt(String),
    #[error("unsupported index container version {0}")]
    UnsupportedVersion(u32),
    #[error("index header declares dimension {found}, expected {expected}")]
    HeaderMismatch { expected: usize, found: usize },
    #[error("index checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("invalid index contents: {0}")]
    Invalid(#[from] CorpusError),
}

/// Serialize a matrix to container bytes.
#[must_use]
pub fn encode(matrix: &EmbeddingMatrix) -> Vec<u8> {
    let keys = matrix.keys();
    let mut out = Vec::with_capacity(
        HEADER_LEN + keys.len() * 16 + matrix.raw_data().len() * 4 + CHECKSUM_LEN,
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(matrix.dimension()).expect("dimension fits u32").to_le_bytes());
    out.extend_from_slice(&u32::try_from(keys.len()).expect("row count fits u32").to_le_bytes());
    for key in keys {
        out.push(key.segment.code());
        let id = key.video_id.as_bytes();
        out.extend_from_slice(&u16::try_from(id.len()).expect("video id under 64 KiB").to_le_bytes());
        out.extend_from_slice(id);
    }
    for value in matrix.raw_data() {
        out.extend_from_slice(&value.to_le_bytes());
    }
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(ContainerError::Corrupt(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
        };
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parse container bytes.
pub fn decode(bytes: &[u8]) -> Result<EmbeddingMatrix, ContainerError> {
    if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
        return Err(ContainerError::Corrupt(format!(
            "truncated: {} bytes is shorter than the fixed header",
            bytes.len()
        )));
    }
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(ContainerError::Corrupt("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let dimension = r.u32()? as usize;
    let rows = r.u32()? as usize;
    if dimension == 0 {
        return Err(ContainerError::Corrupt("zero dimension".into()));
    }

    let mut keys = Vec::with_capacity(rows.min(1 << 20));
    for _ in 0..rows {
        let code = r.u8()?;
        let segment = Segment::from_code(code)
            .ok_or_else(|| ContainerError::Corrupt(format!("unknown segment code {code}")))?;
        let len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(len)?)
            .map_err(|_| ContainerError::Corrupt("video id is not UTF-8".into()))?;
        keys.push(RowKey::new(id, segment));
    }

    let payload = rows
        .checked_mul(dimension)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| ContainerError::Corrupt("row table overflows".into()))?;
    let remaining = bytes.len() - r.pos;
    if remaining < payload + CHECKSUM_LEN {
        return Err(ContainerError::Corrupt(format!(
            "truncated: {remaining} bytes after the id table, {} required",
            payload + CHECKSUM_LEN
        )));
    }
    if remaining > payload + CHECKSUM_LEN {
        return Err(ContainerError::Corrupt(format!(
            "{} trailing bytes after the checksum",
            remaining - payload - CHECKSUM_LEN
        )));
    }

    let body_end = bytes.len() - CHECKSUM_LEN;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
    let computed = fnv1a64(&bytes[..body_end]);
    if stored != computed {
        return Err(ContainerError::ChecksumMismatch { stored, computed });
    }

    let floats = r.take(payload)?;
    let mut data = floats
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let rows = keys
        .into_iter()
        .map(|key| (key, data.by_ref().take(dimension).collect::<Vec<f32>>()));
    Ok(EmbeddingMatrix::from_rows(dimension, rows)?)
}

pub fn save_index(path: impl AsRef<Path>, matrix: &EmbeddingMatrix) -> Result<(), ContainerError> {
    fs::write(path, encode(matrix))?;
    Ok(())
}

pub fn load_index(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, ContainerError> {
    decode(&fs::read(path)?)
}

/// Load an index and require a specific dimension, e.g. the manifest's.
pub fn load_index_with_dimension(
    path: impl AsRef<Path>,
    expected: usize,
) -> Result<EmbeddingMatrix, ContainerError> {
    let bytes = fs::read(path)?;
    if bytes.len() >= HEADER_LEN {
        let found = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        if found != expected {
            return Err(ContainerError::HeaderMismatch { expected, found });
        }
    }
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingMatrix {
        let s = 0.5_f32;
        EmbeddingMatrix::from_rows(
            4,
            [
                (RowKey::new("v1", Segment::Whole), vec![1.0, 0.0, 0.0, 0.0]),
                (RowKey::new("v2", Segment::Whole), vec![s, s, s, s]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_two_by_four() {
        let m = sample();
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = encode(&sample());
        for cut in [3, 19, 30, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, ContainerError::Corrupt(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn flipped_payload_bit_fails_checksum() {
        let mut bytes = encode(&sample());
        let n = bytes.len();
        bytes[n - 12] ^= 0x01;
        assert!(matches!(
            decode(&bytes),
            Err(ContainerError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic_is_corrupt() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(ContainerError::Corrupt(_))));
    }

    #[test]
    fn dimension_expectation_checked_against_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        save_index(&path, &sample()).unwrap();
        assert!(load_index_with_dimension(&path, 4).is_ok());
        assert!(matches!(
            load_index_with_dimension(&path, 8),
            Err(ContainerError::HeaderMismatch { expected: 8, found: 4 })
        ));
    }
}
