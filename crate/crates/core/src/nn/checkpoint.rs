//! `PBRK` tensor container.
//!
//! Little-endian layout:
//!
//! ```text
//! "PBRK" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | rank x u64 dims | f32 payload
//! u64 CRC-64/XZ over every preceding byte
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use super::params::ParameterStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PBRK";
pub const VERSION: u32 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn encode(tensors: &[(&str, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::InvalidArgument("too many tensors".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        let nl = u16::try_from(nb.len()).map_err(|_| Error::InvalidArgument(format!("name too long: {name}")))?;
        buf.extend_from_slice(&nl.to_le_bytes());
        buf.extend_from_slice(nb);
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::InvalidArgument("rank > 255".into()))?;
        buf.push(rank);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = CRC64.checksum(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor<f32>)>, String> {
    if bytes.len() < 20 {
        return Err("file too short".into());
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    if CRC64.checksum(body) != stored {
        return Err("CRC mismatch".into());
    }
    let mut c = Cursor { bytes: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nl = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(nl)?).map_err(|e| e.to_string())?.to_string();
        let rank = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        out.push((name, Tensor::from_vec(&shape, data).map_err(|e| e.to_string())?));
    }
    if c.pos != body.len() {
        return Err("trailing bytes after last tensor".into());
    }
    Ok(out)
}

pub fn write_file(path: &Path, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    let bytes = encode(tensors)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|msg| Error::Checkpoint { path: path.to_path_buf(), msg })
}

/// Serializes the values of a store in entry order.
pub fn store_tensors<F: Scalar>(store: &ParameterStore<F>) -> Vec<(String, Tensor<f32>)> {
    store.iter().map(|(_, p)| (p.name.clone(), p.value.cast())).collect()
}

/// Copies tensors into same-named, same-shaped entries of `store`.
/// Every store entry must be present.
pub fn load_into_store<F: Scalar>(store: &mut ParameterStore<F>, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let t = tensors
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {name}")))?;
        store.set_value(id, t.1.cast())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::from_vec(&[2], vec![1.0f32, -2.5]).unwrap();
        let bytes = encode(&[("ab", &t)]).unwrap();
        assert_eq!(&bytes[..4], b"PBRK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &2u16.to_le_bytes());
        assert_eq!(&bytes[14..16], b"ab");
        assert_eq!(bytes[16], 1);
        assert_eq!(&bytes[17..25], &2u64.to_le_bytes());
        assert_eq!(&bytes[25..29], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 33 + 8);
    }

    #[test]
    fn corruption_detected() {
        let t = Tensor::from_vec(&[1], vec![3.0f32]).unwrap();
        let mut bytes = encode(&[("x", &t)]).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back[0].1, t);
        bytes[18] ^= 1;
        assert!(decode(&bytes).unwrap_err().contains("CRC"));
    }
}
