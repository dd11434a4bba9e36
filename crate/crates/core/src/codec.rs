//! Little-endian binary helpers for dataset and checkpoint files. Integers
//! are `u32`; real values are stored as `f32`.

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8], version: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit the u32 header field")))?;
        self.u32(v);
        Ok(())
    }

    pub fn f32(&mut self, v: f64) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f32(v);
        }
    }

    pub fn flags(&mut self, vs: &[bool]) {
        for &v in vs {
            self.u32(u32::from(v));
        }
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.usize(s.len())?;
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
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
    /// Checks the magic bytes and returns the reader with the version.
    pub fn open(data: &'a [u8], magic: &[u8]) -> Result<(Self, u32)> {
        if data.len() < magic.len() || &data[..magic.len()] != magic {
            return Err(Error::Format {
                offset: 0,
                message: format!("missing {} magic", String::from_utf8_lossy(magic)),
            });
        }
        let mut r = Reader {
            data,
            pos: magic.len(),
        };
        let version = r.u32("version")?;
        Ok((r, version))
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset(),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.error(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.data.len() - self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    pub fn f32(&mut self, what: &str) -> Result<f64> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.error(format!("{what}: element count {n} overflows")))?;
        let b = self.take(bytes, what)?;
        Ok(b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    pub fn flags(&mut self, n: usize, what: &str) -> Result<Vec<bool>> {
        (0..n)
            .map(|_| {
                let at = self.offset();
                match self.u32(what)? {
                    0 => Ok(false),
                    1 => Ok(true),
                    v => Err(Error::Format {
                        offset: at,
                        message: format!("{what}: flag must be 0 or 1, got {v}"),
                    }),
                }
            })
            .collect()
    }

    pub fn str(&mut self, what: &str) -> Result<String> {
        let n = self.usize(what)?;
        let at = self.offset();
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            offset: at,
            message: format!("{what} is not valid UTF-8"),
        })
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.error(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
