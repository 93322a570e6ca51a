//! GSTN: a minimal bit-exact tensor file.
//!
//! Layout: magic `GSTN`, version 0x01, dtype 0x00 (f64 little-endian), rank
//! byte, `rank` u32 little-endian extents, row-major payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub(crate) const MAGIC: [u8; 4] = *b"GSTN";
const VERSION: u8 = 1;
const DTYPE_F64: u8 = 0;

pub fn write_tensor<T: Real>(mut out: impl Write, t: &Tensor<T>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::invalid(format!("rank {} too large for GSTN", t.rank())));
    }
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.numel());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&[VERSION, DTYPE_F64, t.rank() as u8]);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("extent {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Byte reader that remembers its absolute offset for error reports.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], base: u64) -> Self {
        Self { bytes, pos: 0, base }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    pub(crate) fn fail<X>(&self, msg: impl Into<String>) -> Result<X> {
        Err(Error::Format { offset: self.offset(), msg: msg.into() })
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return self.fail(format!("truncated {what}: expected {n} bytes, found {left}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn rest(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn tensor<T: Real>(&mut self) -> Result<Tensor<T>> {
        let start = self.offset();
        if self.take(4, "magic")? != MAGIC {
            return Err(Error::Format { offset: start, msg: "bad magic, not a GSTN tensor".into() });
        }
        let version = self.u8("version")?;
        if version != VERSION {
            return Err(Error::Format { offset: self.offset() - 1, msg: format!("unsupported GSTN version {version}") });
        }
        let dtype = self.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format { offset: self.offset() - 1, msg: format!("unsupported dtype {dtype}") });
        }
        let rank = self.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = self.offset();
            let d = self.u32("extent")? as usize;
            if d == 0 {
                return Err(Error::Format { offset: at, msg: "zero extent".into() });
            }
            shape.push(d);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = match numel.and_then(|n| n.checked_mul(8)) {
            Some(b) => b,
            None => return self.fail("extents overflow"),
        };
        let payload = self.take(bytes, "payload")?;
        let data = payload.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect();
        Tensor::new(shape, data)
    }
}

/// Reads one tensor; trailing bytes are an error.
pub fn read_tensor<T: Real>(mut input: impl Read) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor::new(&bytes, 0);
    let t = cur.tensor()?;
    if cur.rest() != 0 {
        return cur.fail(format!("{} trailing bytes after tensor", cur.rest()));
    }
    Ok(t)
}

pub fn save_tensor<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_tensor(fs::File::open(path)?)
}
