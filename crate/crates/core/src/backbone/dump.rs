//! CFSD feature-dump files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "CFSD" | version u32 | record count u64
//! per record: image id u64 | lambda f64 | name length u32 | name bytes
//!             | rank u8 | dims u32 × rank | payload f32 × prod(dims)
//! crc32 u32 over every preceding byte
//! ```
//!
//! `x̂₀` and `ε̂` are stored under the reserved names [`XHAT0`] and
//! [`EPSHAT`]. Readers validate the whole file before returning anything.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CFSD";
pub const FORMAT_VERSION: u32 = 1;
pub const XHAT0: &str = "__xhat0";
pub const EPSHAT: &str = "__epshat";

/// `[dump]` section of a run config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpConfig {
    /// Backbone to record; the first configured backbone when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    pub image_id: u64,
    pub lambda: f64,
    pub name: String,
    pub tensor: Tensor,
}

pub fn encode(records: &[DumpRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        let rank = u8::try_from(r.tensor.rank())
            .map_err(|_| Error::format(format!("rank {} does not fit a byte", r.tensor.rank())))?;
        buf.extend_from_slice(&r.image_id.to_le_bytes());
        buf.extend_from_slice(&r.lambda.to_le_bytes());
        buf.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.name.as_bytes());
        buf.push(rank);
        for &d in r.tensor.shape() {
            let d = u32::try_from(d).map_err(|_| Error::format("dimension exceeds u32"))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in r.tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(format!("truncated dump at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<DumpRecord>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format("bad magic, not a CFSD dump"));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported dump version {version}")));
    }
    let count = cur.u64()?;
    if bytes.len() < cur.pos + 4 {
        return Err(Error::format("truncated dump: missing checksum"));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let mut body = Cursor {
        bytes: &bytes[..body_end],
        pos: cur.pos,
    };
    let mut records = Vec::new();
    for i in 0..count {
        let image_id = body.u64()?;
        let lambda = body.f64()?;
        let len = body.u32()? as usize;
        let name = std::str::from_utf8(body.take(len)?)
            .map_err(|_| Error::format(format!("record {i}: hook name is not UTF-8")))?
            .to_string();
        let rank = body.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(body.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = body.take(n.checked_mul(4).ok_or_else(|| Error::format("payload too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        records.push(DumpRecord {
            image_id,
            lambda,
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    if body.pos != body_end {
        return Err(Error::format(format!(
            "{} trailing bytes after {count} records",
            body_end - body.pos
        )));
    }
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(Error::format("checksum mismatch, dump is corrupted"));
    }
    let mut seen = BTreeSet::new();
    for r in &records {
        if !seen.insert((r.image_id, r.lambda.to_bits(), r.name.as_str())) {
            return Err(Error::format(format!(
                "duplicate record (image {}, λ {}, {})",
                r.image_id, r.lambda, r.name
            )));
        }
    }
    let passes: BTreeSet<(u64, u64)> = records
        .iter()
        .map(|r| (r.image_id, r.lambda.to_bits()))
        .collect();
    for &(id, bits) in &passes {
        for reserved in [XHAT0, EPSHAT] {
            if !seen.contains(&(id, bits, reserved)) {
                return Err(Error::format(format!(
                    "image {id} at λ {} lacks {reserved}",
                    f64::from_bits(bits)
                )));
            }
        }
    }
    Ok(records)
}

pub fn write_dump(path: &Path, records: &[DumpRecord]) -> Result<()> {
    std::fs::write(path, encode(records)?)?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<Vec<DumpRecord>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pass(id: u64, lambda: f64) -> Vec<DumpRecord> {
        let t = |v: f64| Tensor::filled(&[1, 2, 2], v);
        vec![
            DumpRecord { image_id: id, lambda, name: XHAT0.into(), tensor: t(0.5) },
            DumpRecord { image_id: id, lambda, name: EPSHAT.into(), tensor: t(-1.25) },
            DumpRecord {
                image_id: id,
                lambda,
                name: "decoder.0".into(),
                tensor: Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            },
        ]
    }

    #[test]
    fn round_trip() {
        let records = pass(7, 5.0);
        let bytes = encode(&records).unwrap();
        assert_eq!(&bytes[..4], b"CFSD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
        assert_eq!(decode(&bytes).unwrap(), records);
    }

    #[test]
    fn empty_dump() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes.len(), 20);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn rejections() {
        let bytes = encode(&pass(1, 0.0)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        for cut in [3, 10, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        let payload = bytes.len() - 8;
        bad[payload] ^= 0x01;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));

        let mut records = pass(1, 0.0);
        records.remove(1);
        assert!(matches!(decode(&encode(&records).unwrap()), Err(Error::Format(_))));
        let mut records = pass(1, 0.0);
        records.push(records[2].clone());
        assert!(matches!(decode(&encode(&records).unwrap()), Err(Error::Format(_))));
    }
}
