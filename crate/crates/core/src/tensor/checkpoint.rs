//! Binary weight files.
//!
//! Layout (all integers little-endian): magic `STMW`, `u32` version, `u32`
//! tensor count, then per tensor a `u16` name length, the UTF-8 name, a `u8`
//! dtype code (0 = f32), a `u8` rank, `rank` × `u64` extents and the raw
//! little-endian f32 payload.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::Tensor;
use crate::error::{Result, StmError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STMW";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_checkpoint<'a, I>(entries: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
{
    let entries: Vec<_> = entries.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_len = u16::try_from(name.len())
            .map_err(|_| StmError::invalid(format!("tensor name too long: {name}")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F32);
        buf.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
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

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<IndexMap<String, Tensor<f32>>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32()?;
    let mut out = IndexMap::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| format!("tensor name is not UTF-8: {e}"))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(format!("{name}: unsupported dtype code {dtype}"));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| format!("{name}: extent overflow"))?);
        }
        let len: usize = shape.iter().product();
        let payload = r.take(len.checked_mul(4).ok_or("payload size overflow")?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| format!("{name}: {e}"))?;
        if out.insert(name.clone(), tensor).is_some() {
            return Err(format!("duplicate tensor name {name}"));
        }
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn write_checkpoint<'a, I>(path: &Path, entries: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
{
    let bytes = encode_checkpoint(entries)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| StmError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| StmError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<IndexMap<String, Tensor<f32>>> {
    let bytes = fs::read(path).map_err(|e| StmError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|m| StmError::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(&[2], vec![1.0f32, -2.5]).unwrap();
        let bytes = encode_checkpoint([("a/w", &t)]).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"STMW");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&3u16.to_le_bytes());
        expected.extend_from_slice(b"a/w");
        expected.push(0);
        expected.push(1);
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_preserves_names_order_and_bits() {
        let a = Tensor::new(&[2, 2], vec![0.1f32, f32::MIN_POSITIVE, -0.0, 7.0]).unwrap();
        let b = Tensor::new(&[1, 3, 1], vec![1.0f32, 2.0, 3.0]).unwrap();
        let bytes = encode_checkpoint([("z", &a), ("a", &b)]).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        let names: Vec<_> = back.keys().cloned().collect();
        assert_eq!(names, ["z", "a"]);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back["z"]), bits(&a));
        assert_eq!(back["a"].shape(), b.shape());
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let t = Tensor::new(&[3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let bytes = encode_checkpoint([("t", &t)]).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
