//! Little-endian binary tensor encoding:
//! `"ALNT" | u32 rank | u64 extents[rank] | u8 dtype (0 = f32, 1 = f64) | payload`.

use std::io::Read;

use super::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"ALNT";

pub fn encode_tensor<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.push(T::DTYPE.tag());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn tensor_to_bytes<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.rank() + t.len() * T::DTYPE.size());
    encode_tensor(t, &mut out);
    out
}

/// Cursor over an in-memory byte buffer with integrity-checked reads.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Integrity(format!(
                "truncated input: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Integrity("invalid utf-8 in string field".into()))
    }
}

pub fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Decodes one tensor. A stored payload of the other precision is converted.
pub fn decode_tensor<T: Real>(r: &mut ByteReader<'_>) -> Result<Tensor<T>> {
    let magic = r.take(4)?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Integrity(format!("bad tensor magic {magic:?}")));
    }
    let rank = r.u32()? as usize;
    if rank > 16 {
        return Err(Error::Integrity(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Integrity("extent overflow".into()))?);
    }
    let dtype = DType::from_tag(r.u8()?).ok_or_else(|| Error::Integrity("unknown dtype flag".into()))?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| Error::Integrity("element count overflow".into()))?;
    let bytes = r.take(n.checked_mul(dtype.size()).ok_or_else(|| Error::Integrity("size overflow".into()))?)?;
    let data: Vec<T> = match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
    };
    Tensor::new(&shape, data)
}

pub fn tensor_from_bytes<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = ByteReader::new(bytes);
    let t = decode_tensor(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::Integrity(format!("{} trailing bytes after tensor", r.remaining())));
    }
    Ok(t)
}

pub fn read_tensor_file<T: Real>(path: &std::path::Path) -> Result<Tensor<T>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    tensor_from_bytes(&buf)
}

pub fn write_tensor_file<T: Real>(path: &std::path::Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, tensor_to_bytes(t)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64(&[2, 1], &[1.0, -2.0]).unwrap();
        let b = tensor_to_bytes(&t);
        assert_eq!(&b[..4], b"ALNT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 1);
        assert_eq!(b[24], 0);
        assert_eq!(b.len(), 25 + 8);
        assert_eq!(f32::from_le_bytes(b[29..33].try_into().unwrap()), -2.0);
    }

    #[test]
    fn round_trip_f64() {
        let t = Tensor::<f64>::from_f64(&[3], &[0.1, 0.2, 1e-300]).unwrap();
        let back: Tensor<f64> = tensor_from_bytes(&tensor_to_bytes(&t)).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::<f32>::ones(&[4]);
        let mut b = tensor_to_bytes(&t);
        assert!(matches!(tensor_from_bytes::<f32>(&b[..b.len() - 1]), Err(Error::Integrity(_))));
        b[0] = b'X';
        assert!(matches!(tensor_from_bytes::<f32>(&b), Err(Error::Integrity(_))));
    }
}
