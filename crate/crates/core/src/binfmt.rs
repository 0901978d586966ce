//! Little-endian helpers shared by the versioned checkpoint formats.

use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8], version: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Length-prefixed blob of f64 values.
    pub fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks the magic and returns the reader positioned after the version.
    pub fn open(data: &'a [u8], magic: &[u8; 8], supported: u32) -> Result<Self> {
        let mut r = Reader { data, pos: 0 };
        let m = r.take(8)?;
        if m != magic {
            return Err(Error::parse("offset 0", "bad magic"));
        }
        let version = r.u32()?;
        if version != supported {
            return Err(Error::parse(
                "offset 8",
                format!("unsupported version {version} (expected {supported})"),
            ));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::parse(
                format!("offset {}", self.pos),
                format!("unexpected end of data (needed {n} bytes)"),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn offset(&self) -> usize {
        self.pos
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

    pub fn f64(&mut self) -> Result<f64> {
        let at = self.pos;
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::parse(format!("offset {at}"), "non-finite value"));
        }
        Ok(v)
    }

    /// Reads a length-prefixed f64 blob, requiring exactly `expected` values.
    pub fn f64s(&mut self, expected: usize) -> Result<Vec<f64>> {
        let at = self.pos;
        let len = self.u64()?;
        if len != expected as u64 {
            return Err(Error::Structure(format!(
                "blob at offset {at} holds {len} values, expected {expected}"
            )));
        }
        let remaining = (self.data.len() - self.pos) / 8;
        if expected > remaining {
            return Err(Error::parse(
                format!("offset {}", self.pos),
                "blob runs past end of data",
            ));
        }
        (0..expected).map(|_| self.f64()).collect()
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::parse(
                format!("offset {}", self.pos),
                format!("{} trailing bytes", self.data.len() - self.pos),
            ));
        }
        Ok(())
    }
}
