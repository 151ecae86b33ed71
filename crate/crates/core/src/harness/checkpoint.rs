//! Binary parameter checkpoints.
//!
//! Little-endian layout: magic `GSSL`, version `u32`, parameter count `u64`,
//! then per parameter the name length `u16`, UTF-8 name, rank `u8`, `rank`
//! dimensions as `u64` and the `f64` values in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::ParameterSet;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GSSL";
pub const VERSION: u32 = 1;
const KIND: &str = "checkpoint";

pub fn encode_checkpoint(params: &ParameterSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + params.numel() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                kind: KIND,
                detail: format!(
                    "{what} needs {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ),
            }),
        }
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ParameterSet> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            kind: KIND,
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            kind: KIND,
            found: version,
            supported: VERSION,
        });
    }
    let count = r.u64("parameter count")?;
    let mut params = ParameterSet::new();
    for i in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes"));
        let name = std::str::from_utf8(r.take(len as usize, "name")?)
            .map_err(|_| Error::DimMismatch {
                kind: KIND,
                detail: format!("parameter {i} name is not UTF-8"),
            })?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dimension")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::DimMismatch {
                kind: KIND,
                detail: format!("`{name}` dimensions {dims:?} overflow"),
            })?;
        let bytes = r.take(numel.saturating_mul(8), "values")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(dims.clone(), data).map_err(|_| Error::DimMismatch {
            kind: KIND,
            detail: format!("`{name}` has invalid shape {dims:?}"),
        })?;
        params.push(name, t)?;
    }
    if r.pos != buf.len() {
        return Err(Error::DimMismatch {
            kind: KIND,
            detail: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ParameterSet, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterSet> {
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_encoder, EncoderConfig};

    fn params() -> ParameterSet {
        init_encoder(&EncoderConfig::desk(5), 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let p = params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.gssl");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.names().collect::<Vec<_>>(), q.names().collect::<Vec<_>>());
    }

    #[test]
    fn header_layout() {
        let mut p = ParameterSet::new();
        p.push("w", Tensor::matrix(1, 2, vec![1.5, -2.0]).unwrap()).unwrap();
        let b = encode_checkpoint(&p).unwrap();
        assert_eq!(&b[..4], b"GSSL");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(b[16..18].try_into().unwrap()), 1);
        assert_eq!(b[18], b'w');
        assert_eq!(b[19], 2);
        assert_eq!(b.len(), 20 + 16 + 16);
        assert_eq!(f64::from_le_bytes(b[36..44].try_into().unwrap()), 1.5);
    }

    #[test]
    fn corruption_gives_distinct_errors() {
        let b = encode_checkpoint(&params()).unwrap();
        let mut magic = b.clone();
        magic[0] ^= 0xff;
        assert!(matches!(decode_checkpoint(&magic), Err(Error::BadMagic { .. })));
        let mut v2 = b.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_checkpoint(&v2), Err(Error::Version { found: 2, .. })));
        for cut in [2, 10, 17, b.len() / 2, b.len() - 1] {
            assert!(matches!(decode_checkpoint(&b[..cut]), Err(Error::Truncated { .. })), "cut {cut}");
        }
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(Error::DimMismatch { .. })));
    }
}
