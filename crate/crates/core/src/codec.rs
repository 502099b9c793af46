//! Little-endian binary helpers shared by the feature and checkpoint formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Reader that tracks its byte offset so format errors can point at it.
pub(crate) struct LeReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> LeReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn into_inner(self) -> R {
        self.inner
    }

    pub fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    return Err(Error::format(
                        self.offset + read as u64,
                        format!("truncated while reading {what}"),
                    ))
                }
                Ok(n) => read += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::io(format!("reading {what}"), e)),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let mut buf = [0u8; 8];
        let mut read = 0;
        while read < 8 {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => break,
                Ok(n) => read += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::io("reading magic", e)),
            }
        }
        if read == 0 {
            return Err(Error::format(0, "missing magic"));
        }
        if read < 8 || &buf != expected {
            return Err(Error::format(
                self.offset,
                format!(
                    "bad magic: expected {:?}",
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        self.offset += 8;
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b, what)?;
        Ok(b[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn u128(&mut self, what: &str) -> Result<u128> {
        let mut b = [0u8; 16];
        self.fill(&mut b, what)?;
        Ok(u128::from_le_bytes(b))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }

    pub fn f64_vec(&mut self, len: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.offset;
        let mut buf = vec![0u8; len * 8];
        self.fill(&mut buf, what)?;
        let out: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                start + 8 * i as u64,
                format!("non-finite value in {what}"),
            ));
        }
        Ok(out)
    }

    /// Fails unless the stream is exhausted.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::format(self.offset, "trailing bytes")),
            Err(e) => Err(Error::io("reading trailer", e)),
        }
    }

    /// Like [`Self::magic`], but a clean end of stream yields `false`.
    pub fn optional_magic(&mut self, expected: &[u8; 8]) -> Result<bool> {
        let mut buf = [0u8; 8];
        let mut read = 0;
        while read < 8 {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => break,
                Ok(n) => read += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::io("reading section magic", e)),
            }
        }
        if read == 0 {
            return Ok(false);
        }
        if read < 8 || &buf != expected {
            return Err(Error::format(
                self.offset,
                format!(
                    "bad section magic: expected {:?}",
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        self.offset += 8;
        Ok(true)
    }
}

pub(crate) struct LeWriter<W> {
    inner: W,
}

impl<W: Write> LeWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn into_inner(self) -> W {
        self.inner
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner
            .write_all(b)
            .map_err(|e| Error::io("writing", e))
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u128(&mut self, v: u128) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64_slice(&mut self, vs: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 8);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&buf)
    }
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} ({v}) does not fit in u32")))
}
