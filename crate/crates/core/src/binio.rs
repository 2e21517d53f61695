//! Little-endian cursor shared by the binary containers. Every failure names
//! the byte offset where decoding stopped.

use crate::error::{AfrError, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn ensure_remaining(&self, n: usize) -> Result<()> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(AfrError::parse(
                self.offset(),
                format!("truncated payload: need {n} bytes, {left} remain"),
            ));
        }
        Ok(())
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.ensure_remaining(n)?;
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().unwrap())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.offset();
        let got = self.bytes(4)?;
        if got != magic {
            return Err(AfrError::parse(
                at,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }

    pub fn expect_version(&mut self, version: u32) -> Result<()> {
        let at = self.offset();
        let got = self.u32()?;
        if got != version {
            return Err(AfrError::parse(
                at,
                format!("unsupported version {got}, expected {version}"),
            ));
        }
        Ok(())
    }

    /// `n` finite doubles.
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        self.ensure_remaining(n.saturating_mul(8))?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let at = self.offset();
            let v = f64::from_le_bytes(self.array()?);
            if !v.is_finite() {
                return Err(AfrError::parse(at, "non-finite value"));
            }
            out.push(v);
        }
        Ok(out)
    }

    /// `n` u32 indices, each required to be below `bound`.
    pub fn indices(&mut self, n: usize, bound: usize, what: &str) -> Result<Vec<usize>> {
        self.ensure_remaining(n.saturating_mul(4))?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let at = self.offset();
            let v = self.u32()? as usize;
            if v >= bound {
                return Err(AfrError::parse(
                    at,
                    format!("{what} {v} out of range (< {bound})"),
                ));
            }
            out.push(v);
        }
        Ok(out)
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(AfrError::parse(
                self.offset(),
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}
