//! Little-endian read/write helpers shared by the container formats.

use crate::dtype::Dtype;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("unexpected end of data at offset {0}")]
    Truncated(usize),
    #[error("malformed field: {0}")]
    Malformed(String),
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, WireError> {
        Ok(f32::from_bits(self.u32()?))
    }

    pub fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn str16(&mut self) -> Result<String, WireError> {
        let n = self.u16()? as usize;
        self.utf8(n)
    }

    pub fn str32(&mut self) -> Result<String, WireError> {
        let n = self.u32()? as usize;
        self.utf8(n)
    }

    fn utf8(&mut self, n: usize) -> Result<String, WireError> {
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| WireError::Malformed("utf-8 string".into()))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub(crate) fn put_str16(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn put_str32(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn put_dtype(out: &mut Vec<u8>, dtype: &Dtype) {
    out.push(dtype.tag());
    if let Dtype::Int8Affine { scale, zero_point } = dtype {
        out.extend_from_slice(&scale.to_le_bytes());
        out.push(*zero_point as u8);
    }
}

pub(crate) fn get_dtype(r: &mut Reader<'_>) -> Result<Dtype, WireError> {
    let tag = r.u8()?;
    let (scale, zp) = if tag == 4 { (r.f32()?, r.u8()? as i8) } else { (0.0, 0) };
    Dtype::from_tag(tag, scale, zp).ok_or_else(|| WireError::Malformed(format!("dtype tag {tag}")))
}

pub(crate) fn put_meta(out: &mut Vec<u8>, meta: &BTreeMap<String, String>) {
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for (k, v) in meta {
        put_str16(out, k);
        put_str32(out, v);
    }
}

pub(crate) fn get_meta(r: &mut Reader<'_>) -> Result<BTreeMap<String, String>, WireError> {
    let n = r.u32()?;
    let mut meta = BTreeMap::new();
    for _ in 0..n {
        let k = r.str16()?;
        let v = r.str32()?;
        meta.insert(k, v);
    }
    Ok(meta)
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Splits off and verifies a trailing SHA-256 of everything before it.
pub(crate) fn check_trailer(bytes: &[u8]) -> Result<&[u8], TrailerError> {
    if bytes.len() < 32 {
        return Err(TrailerError::Truncated);
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if sha256(body) != trailer {
        return Err(TrailerError::Mismatch);
    }
    Ok(body)
}

pub(crate) enum TrailerError {
    Truncated,
    Mismatch,
}
