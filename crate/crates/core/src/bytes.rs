//! Little-endian packing helpers shared by the binary file formats.

use crate::error::{Error, Result};

pub(crate) fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Length-prefixed UTF-8 string.
pub(crate) fn push_str(buf: &mut Vec<u8>, s: &str) {
    push_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

/// Cursor over a byte buffer; every shortfall reports the format name and
/// offset instead of panicking.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                what: self.what,
                detail: format!(
                    "truncated: wanted {} bytes at offset {}, file has {}",
                    n,
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64_chunk(&mut self, count: usize) -> Result<impl Iterator<Item = f64> + 'a> {
        let bytes = count.checked_mul(8).ok_or_else(|| Error::Format {
            what: self.what,
            detail: "value count overflows".into(),
        })?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap())))
    }

    /// Length-prefixed UTF-8 string, bounded to catch corrupt headers.
    pub fn str_prefixed(&mut self, max_len: u32) -> Result<String> {
        let len = self.u32()?;
        if len > max_len {
            return Err(Error::Format {
                what: self.what,
                detail: format!("string of {} bytes exceeds the {} limit", len, max_len),
            });
        }
        String::from_utf8(self.take(len as usize)?.to_vec()).map_err(|_| Error::Format {
            what: self.what,
            detail: "string is not UTF-8".into(),
        })
    }

    /// Error if any input remains unconsumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                what: self.what,
                detail: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}
