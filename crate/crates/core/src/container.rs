//! Shared binary container used by every on-disk artifact.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [8 bytes magic][u32 header length][header: UTF-8 JSON][payload]
//! ```
//!
//! The payload is a sequence of fixed-width arrays whose lengths are implied
//! by the header; a payload that is too short or too long is a shape error.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC_LEN: usize = 8;

/// Serializes `header` and `payload` behind `magic` into a byte vector.
pub fn encode<H: Serialize>(magic: &[u8; MAGIC_LEN], header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Format("header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(MAGIC_LEN + 4 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Splits a container into its parsed header and raw payload.
pub fn decode<'a, H: DeserializeOwned>(bytes: &'a [u8], magic: &[u8; MAGIC_LEN]) -> Result<(H, &'a [u8])> {
    if bytes.len() < MAGIC_LEN {
        return Err(Error::Format("file shorter than magic".into()));
    }
    let (found, rest) = bytes.split_at(MAGIC_LEN);
    if found != magic {
        // Same family, different version: name it explicitly.
        if found[..6] == magic[..6] {
            return Err(Error::Format(format!(
                "unsupported version {:?}, expected {:?}",
                String::from_utf8_lossy(&found[6..]),
                String::from_utf8_lossy(&magic[6..])
            )));
        }
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(magic)
        )));
    }
    if rest.len() < 4 {
        return Err(Error::Shape("missing header length".into()));
    }
    let (len_bytes, rest) = rest.split_at(4);
    let header_len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    if rest.len() < header_len {
        return Err(Error::Shape(format!(
            "header length {header_len} exceeds remaining {} bytes",
            rest.len()
        )));
    }
    let (header, payload) = rest.split_at(header_len);
    let header = serde_json::from_slice(header)
        .map_err(|e| Error::Format(format!("invalid header: {e}")))?;
    Ok((header, payload))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

#[derive(Default)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn f32s(&mut self, values: impl IntoIterator<Item = f32>) -> &mut Self {
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn f64s(&mut self, values: impl IntoIterator<Item = f64>) -> &mut Self {
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn i32s(&mut self, values: impl IntoIterator<Item = i32>) -> &mut Self {
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

/// Sequential reader over a payload; every read is bounds-checked.
pub struct PayloadReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, width: usize, what: &str) -> Result<&'a [u8]> {
        let need = n
            .checked_mul(width)
            .ok_or_else(|| Error::Shape(format!("{what}: element count overflows")))?;
        let remaining = self.bytes.len() - self.pos;
        if remaining < need {
            return Err(Error::Shape(format!(
                "{what}: need {need} bytes, only {remaining} remain"
            )));
        }
        let out = &self.bytes[self.pos..self.pos + need];
        self.pos += need;
        Ok(out)
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        Ok(self
            .take(n, 4, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        Ok(self
            .take(n, 8, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn i32s(&mut self, n: usize, what: &str) -> Result<Vec<i32>> {
        Ok(self
            .take(n, 4, what)?
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(self) -> Result<()> {
        let extra = self.bytes.len() - self.pos;
        if extra != 0 {
            return Err(Error::Shape(format!("{extra} trailing payload bytes")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    struct H {
        n: usize,
    }

    #[test]
    fn encode_decode_roundtrip() {
        let mut w = PayloadWriter::new();
        w.f32s([1.5, -2.0]).i32s([7]);
        let bytes = encode(b"TESTFMT1", &H { n: 2 }, &w.into_bytes()).unwrap();
        let (h, payload): (H, _) = decode(&bytes, b"TESTFMT1").unwrap();
        assert_eq!(h, H { n: 2 });
        let mut r = PayloadReader::new(payload);
        assert_eq!(r.f32s(2, "x").unwrap(), vec![1.5, -2.0]);
        assert_eq!(r.i32s(1, "y").unwrap(), vec![7]);
        r.finish().unwrap();
    }

    #[test]
    fn wrong_magic_and_version() {
        let bytes = encode(b"TESTFMT1", &H { n: 0 }, &[]).unwrap();
        let err = decode::<H>(&bytes, b"OTHERFM1").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let err = decode::<H>(&bytes, b"TESTFMT2").unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn short_and_trailing_payload() {
        let mut r = PayloadReader::new(&[0u8; 6]);
        assert!(matches!(r.f32s(2, "x"), Err(Error::Shape(_))));
        let mut r = PayloadReader::new(&[0u8; 6]);
        r.f32s(1, "x").unwrap();
        assert!(matches!(r.finish(), Err(Error::Shape(_))));
    }
}
