//! Little-endian framing shared by the binary stores.
//!
//! Every store is `magic | header | body | crc32(all preceding bytes)`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("truncated file: needed {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after checksum")]
    Trailing(usize),
    #[error("malformed content: {0}")]
    Malformed(String),
}

/// Append-only little-endian writer.
#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Appends the CRC32 of everything written so far and returns the buffer.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

/// Cursor over a byte slice; every read reports truncation.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).ok_or(CodecError::Truncated {
            needed: usize::MAX,
            have: self.buf.len(),
        })?;
        if end > self.buf.len() {
            return Err(CodecError::Truncated { needed: end, have: self.buf.len() });
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// Reads `n` little-endian f32 values.
    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>, CodecError> {
        let bytes = self.take(n.checked_mul(4).ok_or(CodecError::Malformed("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Checks the magic tag at the current position.
    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<(), CodecError> {
        let found = self.take(4)?;
        if found != magic {
            return Err(CodecError::Magic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    /// Reads the trailing CRC32, verifies it covers all preceding bytes and
    /// that nothing follows it.
    pub fn finish(mut self) -> Result<(), CodecError> {
        let body_end = self.pos;
        let stored = self.u32()?;
        if self.remaining() != 0 {
            return Err(CodecError::Trailing(self.remaining()));
        }
        let computed = crc32fast::hash(&self.buf[..body_end]);
        if stored != computed {
            return Err(CodecError::Checksum { stored, computed });
        }
        Ok(())
    }
}
