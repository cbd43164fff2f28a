//! The MRL1 binary container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MRL1" | u16 version | u8 scalar width | u8 section tag | u64 body length | body
//! ```
//!
//! A file holds exactly one tagged section. Bodies are written with
//! [`Writer`] and parsed with [`Reader`]; scalars are stored at their native
//! width so a round trip is bit-exact.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"MRL1";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum SectionTag {
    Model = 1,
    LinearAutoencoder = 2,
    MlpAutoencoder = 3,
}

impl SectionTag {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(SectionTag::Model),
            2 => Ok(SectionTag::LinearAutoencoder),
            3 => Ok(SectionTag::MlpAutoencoder),
            other => Err(Error::Format(format!("unknown section tag {other}"))),
        }
    }
}

pub fn write_section<T: Scalar>(mut w: impl Write, tag: SectionTag, body: &[u8]) -> Result<()> {
    let mut head = Vec::with_capacity(16);
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.push(T::BYTES as u8);
    head.push(tag as u8);
    head.extend_from_slice(&(body.len() as u64).to_le_bytes());
    w.write_all(&head)?;
    w.write_all(body)?;
    Ok(())
}

/// Reads one section, checking magic, version, scalar width and tag.
pub fn read_section<T: Scalar>(mut r: impl Read, tag: SectionTag) -> Result<Vec<u8>> {
    let mut head = [0u8; 16];
    read_exact(&mut r, &mut head)?;
    if &head[0..4] != MAGIC {
        return Err(Error::BadMagic {
            found: u32::from_be_bytes([head[0], head[1], head[2], head[3]]),
        });
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported MRL1 version {version}")));
    }
    if head[6] as usize != T::BYTES {
        return Err(Error::Format(format!(
            "stored scalar width {} but reading {}",
            head[6],
            T::NAME
        )));
    }
    let found = SectionTag::from_u8(head[7])?;
    if found != tag {
        return Err(Error::Format(format!(
            "expected section {tag:?}, found {found:?}"
        )));
    }
    let len = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize;
    let mut body = Vec::new();
    r.take(len as u64).read_to_end(&mut body)?;
    if body.len() != len {
        return Err(Error::TruncatedPayload {
            expected: len,
            found: body.len(),
        });
    }
    Ok(body)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => {
                return Err(Error::TruncatedPayload {
                    expected: buf.len(),
                    found: filled,
                })
            }
            n => filled += n,
        }
    }
    Ok(())
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }

    pub fn scalars<T: Scalar>(&mut self, vs: &[T]) {
        for &v in vs {
            v.write_le(&mut self.buf);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::TruncatedPayload {
                expected: self.pos + n,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    pub fn scalars<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(
            n.checked_mul(T::BYTES)
                .ok_or_else(|| Error::Format("size overflow".into()))?,
        )?;
        Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn section_round_trip() {
        let mut out = Vec::new();
        write_section::<f64>(&mut out, SectionTag::Model, &[1, 2, 3]).unwrap();
        assert_eq!(&out[..4], b"MRL1");
        let body = read_section::<f64>(&out[..], SectionTag::Model).unwrap();
        assert_eq!(body, vec![1, 2, 3]);
    }

    #[test]
    fn rejects_wrong_magic_width_and_tag() {
        let mut out = Vec::new();
        write_section::<f64>(&mut out, SectionTag::Model, &[0; 8]).unwrap();
        assert!(matches!(
            read_section::<f32>(&out[..], SectionTag::Model),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            read_section::<f64>(&out[..], SectionTag::LinearAutoencoder),
            Err(Error::Format(_))
        ));
        let mut bad = out.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_section::<f64>(&bad[..], SectionTag::Model),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            read_section::<f64>(&out[..out.len() - 1], SectionTag::Model),
            Err(Error::TruncatedPayload { .. })
        ));
    }
}
