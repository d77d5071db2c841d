//! Binary record container shared by weight files and adversarial-batch
//! files. Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes
//! version      u16
//! manifest_len u32
//! manifest     UTF-8 JSON, manifest_len bytes
//! records      repeated until EOF:
//!   name_len   u16
//!   name       UTF-8, name_len bytes
//!   rank       u8
//!   extents    u32 x rank
//!   payload    f64 x product(extents)
//! ```
//!
//! Round-trips are bit-exact: payloads are raw IEEE-754 bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic {found:?} at offset 0 (expected {expected:?})")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("file truncated at byte offset {offset} while reading {field}")]
    Truncated { offset: u64, field: &'static str },
    #[error("manifest is not valid JSON: {0}")]
    BadManifest(#[from] serde_json::Error),
    #[error("record name is not UTF-8 at offset {offset}")]
    BadName { offset: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn write_container(
    path: &Path,
    magic: [u8; 4],
    version: u16,
    manifest: &serde_json::Value,
    records: &[Record],
) -> Result<(), ContainerError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&magic)?;
    w.write_all(&version.to_le_bytes())?;
    let manifest_bytes = serde_json::to_vec(manifest)?;
    w.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for rec in records {
        let name = rec.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[rec.shape.len() as u8])?;
        for &e in &rec.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &rec.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn exact(&mut self, buf: &mut [u8], field: &'static str) -> Result<(), ContainerError> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(ContainerError::Truncated {
                    offset: self.offset,
                    field,
                })
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Returns false on clean EOF before any byte of `buf`.
    fn exact_or_eof(&mut self, buf: &mut [u8], field: &'static str) -> Result<bool, ContainerError> {
        let mut first = [0u8; 1];
        match self.inner.read(&mut first)? {
            0 => return Ok(false),
            _ => {
                self.offset += 1;
                buf[0] = first[0];
            }
        }
        if buf.len() > 1 {
            self.exact(&mut buf[1..], field)?;
        }
        Ok(true)
    }
}

pub fn read_container(
    path: &Path,
    expected_magic: [u8; 4],
    expected_version: u16,
) -> Result<(serde_json::Value, Vec<Record>), ContainerError> {
    let mut r = Counted {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };

    let mut magic = [0u8; 4];
    r.exact(&mut magic, "magic")?;
    if magic != expected_magic {
        return Err(ContainerError::BadMagic {
            found: magic,
            expected: expected_magic,
        });
    }
    let mut v2 = [0u8; 2];
    r.exact(&mut v2, "version")?;
    let version = u16::from_le_bytes(v2);
    if version != expected_version {
        return Err(ContainerError::VersionMismatch {
            found: version,
            expected: expected_version,
        });
    }
    let mut len4 = [0u8; 4];
    r.exact(&mut len4, "manifest length")?;
    let mut manifest_bytes = vec![0u8; u32::from_le_bytes(len4) as usize];
    r.exact(&mut manifest_bytes, "manifest")?;
    let manifest: serde_json::Value = serde_json::from_slice(&manifest_bytes)?;

    let mut records = Vec::new();
    loop {
        let mut nlen = [0u8; 2];
        if !r.exact_or_eof(&mut nlen, "record name length")? {
            break;
        }
        let mut name = vec![0u8; u16::from_le_bytes(nlen) as usize];
        let name_offset = r.offset;
        r.exact(&mut name, "record name")?;
        let name = String::from_utf8(name)
            .map_err(|_| ContainerError::BadName { offset: name_offset })?;
        let mut rank = [0u8; 1];
        r.exact(&mut rank, "record rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut e4 = [0u8; 4];
            r.exact(&mut e4, "record extent")?;
            shape.push(u32::from_le_bytes(e4) as usize);
        }
        let count: usize = shape.iter().product();
        let mut values = Vec::with_capacity(count);
        let mut v8 = [0u8; 8];
        for _ in 0..count {
            r.exact(&mut v8, "record payload")?;
            values.push(f64::from_le_bytes(v8));
        }
        records.push(Record { name, shape, values });
    }
    Ok((manifest, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let records = vec![
            Record {
                name: "a.w".into(),
                shape: vec![2, 2],
                values: vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300],
            },
            Record {
                name: "b".into(),
                shape: vec![1],
                values: vec![std::f64::consts::PI],
            },
        ];
        let manifest = serde_json::json!({"k": 7});
        write_container(&path, *b"CMTT", 1, &manifest, &records).unwrap();
        let (m, rs) = read_container(&path, *b"CMTT", 1).unwrap();
        assert_eq!(m["k"], 7);
        assert_eq!(rs, records);
        assert_eq!(rs[0].values[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_container(&path, *b"AAAA", 1, &serde_json::json!({}), &[]).unwrap();
        let err = read_container(&path, *b"CMTT", 1).unwrap_err();
        assert!(matches!(err, ContainerError::BadMagic { .. }));
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let records = vec![Record {
            name: "w".into(),
            shape: vec![4],
            values: vec![1.0, 2.0, 3.0, 4.0],
        }];
        write_container(&path, *b"CMTT", 1, &serde_json::json!({}), &records).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 5]).unwrap();
        let err = read_container(&path, *b"CMTT", 1).unwrap_err();
        match err {
            ContainerError::Truncated { offset, .. } => {
                assert!(offset > 0 && offset < full.len() as u64)
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_container(&path, *b"CMTT", 2, &serde_json::json!({}), &[]).unwrap();
        let err = read_container(&path, *b"CMTT", 1).unwrap_err();
        assert!(matches!(
            err,
            ContainerError::VersionMismatch { found: 2, expected: 1 }
        ));
    }
}
