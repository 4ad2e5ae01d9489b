//! Little-endian primitives shared by the dataset and checkpoint containers.

use std::io::Write;

use crate::error::{Error, Result};

pub(crate) struct Writer<W: Write>(pub(crate) W);

impl<W: Write> Writer<W> {
    pub(crate) fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }
    pub(crate) fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    pub(crate) fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    pub(crate) fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    pub(crate) fn u128(&mut self, v: u128) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    pub(crate) fn f64s(&mut self, v: &[f64]) -> Result<()> {
        self.len(v.len())?;
        v.iter().try_for_each(|&x| self.f64(x))
    }
    pub(crate) fn len(&mut self, n: usize) -> Result<()> {
        let n = u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("count {n} exceeds u32")))?;
        self.u32(n)
    }
    pub(crate) fn str(&mut self, s: &str) -> Result<()> {
        self.len(s.len())?;
        Ok(self.0.write_all(s.as_bytes())?)
    }
}

pub(crate) struct Reader<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
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
    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    pub(crate) fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().unwrap()))
    }
    pub(crate) fn f64s(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.u32(what)? as usize;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Corrupt(format!("{what}: length {n} exceeds remaining bytes")));
        }
        (0..n).map(|_| self.f64(what)).collect()
    }
    pub(crate) fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Corrupt(format!("{what} is not UTF-8")))
    }
}
