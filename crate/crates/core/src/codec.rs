//! Little-endian primitives shared by the PQEB, PQEC and PQEI file formats.

use std::io::{self, Read, Write};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unexpected EOF")]
    UnexpectedEof,
    #[error("non-finite value in record {record:?}")]
    NonFinite { record: String },
    #[error("dim mismatch: file dim {expected}, record {record:?} has dim {actual}")]
    DimMismatch {
        record: String,
        expected: usize,
        actual: usize,
    },
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("trailing bytes after last record")]
    TrailingBytes,
    #[error("i/o error: {0}")]
    Io(io::Error),
}

impl From<io::Error> for FormatError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FormatError::UnexpectedEof
        } else {
            FormatError::Io(e)
        }
    }
}

pub(crate) struct LeWriter<W> {
    inner: W,
}

impl<W: Write> LeWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> io::Result<()> {
        self.inner.write_all(b)
    }

    pub fn u8(&mut self, v: u8) -> io::Result<()> {
        self.bytes(&[v])
    }

    pub fn u16(&mut self, v: u16) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32s(&mut self, values: &[f32]) -> io::Result<()> {
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&buf)
    }

    /// u16 byte length followed by UTF-8 bytes.
    pub fn id(&mut self, id: &str) -> Result<(), FormatError> {
        let len = u16::try_from(id.len())
            .map_err(|_| FormatError::Invalid(format!("doc_id longer than 65535 bytes: {id:?}")))?;
        self.u16(len)?;
        self.bytes(id.as_bytes())?;
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub(crate) struct LeReader<R> {
    inner: R,
}

impl<R: Read> LeReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf)?;
        Ok(buf)
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found = self.array::<4>()?;
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn version(&mut self) -> Result<u32, FormatError> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(v));
        }
        Ok(v)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn id(&mut self) -> Result<String, FormatError> {
        let len = self.u16()? as usize;
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| FormatError::Invalid(format!("doc_id is not UTF-8: {e}")))
    }

    /// Reads `count` f32 values, rejecting NaN and infinities.
    pub fn f32s(&mut self, count: usize, record: &str) -> Result<Vec<f32>, FormatError> {
        // Read in bounded chunks so a corrupt count cannot trigger a huge allocation
        // before EOF is noticed.
        const CHUNK: usize = 1 << 16;
        let mut out = Vec::with_capacity(count.min(CHUNK));
        let mut buf = vec![0u8; 4 * count.min(CHUNK)];
        let mut remaining = count;
        while remaining > 0 {
            let n = remaining.min(CHUNK);
            let bytes = &mut buf[..4 * n];
            self.inner.read_exact(bytes)?;
            for chunk in bytes.chunks_exact(4) {
                let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                if !v.is_finite() {
                    return Err(FormatError::NonFinite {
                        record: record.to_string(),
                    });
                }
                out.push(v);
            }
            remaining -= n;
        }
        Ok(out)
    }

    pub fn expect_end(&mut self) -> Result<(), FormatError> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(FormatError::TrailingBytes),
        }
    }
}

pub(crate) fn check_finite(values: &[f32], record: &str) -> Result<(), FormatError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FormatError::NonFinite {
            record: record.to_string(),
        })
    }
}

pub(crate) fn to_u32(value: usize, what: &str) -> Result<u32, FormatError> {
    u32::try_from(value).map_err(|_| FormatError::Invalid(format!("{what} {value} exceeds u32")))
}
