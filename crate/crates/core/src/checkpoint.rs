//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"FSLCKPT\0"
//! u32    format version
//! u32    metadata length, then that many UTF-8 bytes (opaque to this crate)
//! u32    tensor count
//! per tensor:
//!   u32 name length, name bytes
//!   u8  value width in bytes (4 or 8)
//!   u32 rank, then rank u64 dims
//!   values, row-major, little-endian
//! ```

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"FSLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Named tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let v = u32::try_from(n).map_err(|_| Error::Checkpoint("length does not fit in 32 bits".into()))?;
    put_u32(out, v);
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(alloc::format!("truncated at byte {} (wanted {n} more)", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        core::str::from_utf8(raw)
            .map(ToString::to_string)
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn new(metadata: impl Into<String>, tensors: Vec<(String, Tensor<T>)>) -> Self {
        Self {
            metadata: metadata.into(),
            tensors,
        }
    }

    /// Serializes at the precision of `T`.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let width = T::PRECISION.width();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_len(&mut out, self.metadata.len())?;
        out.extend_from_slice(self.metadata.as_bytes());
        put_len(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            out.push(width as u8);
            put_len(&mut out, t.rank())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.reserve(t.numel() * width);
            for &v in t.data() {
                match T::PRECISION {
                    Precision::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    /// Parses a container; values stored at another width are converted to `T`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(alloc::format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let metadata = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let width = r.u8()? as usize;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(alloc::format!("tensor `{name}` is too large")))?;
            let raw = r.take(
                numel
                    .checked_mul(width)
                    .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            )?;
            let data: Vec<T> = match width {
                4 => raw
                    .chunks_exact(4)
                    .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                    .collect(),
                8 => raw
                    .chunks_exact(8)
                    .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                    .collect(),
                w => {
                    return Err(Error::Checkpoint(alloc::format!(
                        "tensor `{name}` has unsupported value width {w}"
                    )))
                }
            };
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(alloc::format!(
                "{} trailing bytes",
                bytes.len() - r.at
            )));
        }
        Ok(Self { metadata, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample() -> Checkpoint<f32> {
        Checkpoint::new(
            "{\"k\":1}",
            vec![
                (
                    "a.weight".into(),
                    Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, 7.0]).unwrap(),
                ),
                ("b".into(), Tensor::scalar(0.5)),
            ],
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.encode().unwrap();
        assert_eq!(Checkpoint::<f32>::decode(&bytes).unwrap(), c);
    }

    #[test]
    fn header_and_layout() {
        let bytes = sample().encode().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
        // magic, version, meta, count, two tensors with rank 2 and rank 0
        let expected = 8 + 4 + (4 + 7) + 4 + (4 + 8 + 1 + 4 + 16 + 24) + (4 + 1 + 1 + 4 + 4);
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn widens_f32_to_f64() {
        let bytes = sample().encode().unwrap();
        let wide = Checkpoint::<f64>::decode(&bytes).unwrap();
        assert_eq!(wide.tensors[0].1.data()[1], -2.5);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().encode().unwrap();
        assert!(Checkpoint::<f32>::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::decode(&bad).is_err());
        let mut newer = bytes.clone();
        newer[8] = 9;
        assert!(Checkpoint::<f32>::decode(&newer).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::<f32>::decode(&extra).is_err());
    }
}
