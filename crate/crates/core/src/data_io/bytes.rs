use crate::error::{Error, Result};

/// Cursor over a byte buffer that reports errors with their byte offset and,
/// when set, the record being decoded.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    pub record: Option<usize>,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self {
            buf,
            pos: 0,
            record: None,
        }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::format(self.offset(), self.record, message)
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            self.pos -= 4;
            return Err(self.error(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn len_u32(&mut self, what: &str) -> Result<usize> {
        self.u32(what).map(|v| v as usize)
    }

    pub fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| self.error(format!("{what} length overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn utf8(&mut self, len: usize, what: &str) -> Result<String> {
        let start = self.offset();
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::format(start, self.record, format!("{what} is not valid UTF-8")))
    }

    /// Product of extents, failing on overflow.
    pub fn product(&self, extents: &[usize], what: &str) -> Result<usize> {
        extents
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| self.error(format!("{what} size overflows")))
    }
}

#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn len_u32(&mut self, v: usize, what: &str) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| Error::OutOfRange(format!("{what} {v} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }

    pub fn f32s(&mut self, vals: &[f32]) {
        self.buf.reserve(vals.len() * 4);
        for v in vals {
            self.bytes(&v.to_le_bytes());
        }
    }

    pub fn str_u32(&mut self, s: &str, what: &str) -> Result<()> {
        self.len_u32(s.len(), what)?;
        self.bytes(s.as_bytes());
        Ok(())
    }
}
