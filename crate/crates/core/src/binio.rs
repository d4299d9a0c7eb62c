//! Little-endian framing helpers shared by the checkpoint and dataset formats.

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                offset: self.buf.len() as u64,
                context: format!("{context}: needed {n} bytes at offset {}", self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self, context: &str) -> Result<u32> {
        let b = self.bytes(4, context)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self, context: &str) -> Result<u64> {
        let b = self.bytes(8, context)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f64(&mut self, context: &str) -> Result<f64> {
        let b = self.bytes(8, context)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn magic(&mut self, expected: &'static str) -> Result<()> {
        let n = expected.len();
        let found = &self.buf[..n.min(self.buf.len())];
        if found != expected.as_bytes() {
            return Err(Error::BadMagic {
                expected,
                found: found.to_vec(),
            });
        }
        self.pos = n;
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}
