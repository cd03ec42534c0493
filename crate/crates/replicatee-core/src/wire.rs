//! Length-prefixed, type-tagged binary encoding for every message on the
//! wire.
//!
//! The layout is stable so traces recorded from one build replay against
//! another. Primitives:
//!
//! * integers: little-endian fixed width (`u8`, `u16`, `u32`, `u64`)
//! * byte strings: `u32` length followed by the bytes
//! * options: presence byte (`0`/`1`) followed by the value
//! * node ids: the 3-byte form from [`NodeId::to_wire`]
//! * sequences: `u32` count followed by the elements
//!
//! Transport frames prepend a `u32` length and the 3-byte source id; the
//! remainder is one tagged message. Tag bytes are assigned per concrete
//! message type and documented on each `encode` implementation.

use crate::ids::NodeId;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("message truncated")]
    Truncated,
    #[error("unknown tag {0:#04x}")]
    BadTag(u8),
    #[error("invalid node id")]
    BadNodeId,
    #[error("trailing bytes after message")]
    Trailing,
    #[error("length field out of range")]
    BadLength,
}

/// Append-only encoder.
#[derive(Default)]
pub struct WireWriter {
    buf: Vec<u8>,
}

impl WireWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_tag(tag: u8) -> Self {
        let mut w = Self::new();
        w.put_u8(tag);
        w
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_bool(&mut self, v: bool) {
        self.put_u8(v as u8);
    }

    pub fn put_bytes(&mut self, v: &[u8]) {
        self.put_u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }

    pub fn put_array<const N: usize>(&mut self, v: &[u8; N]) {
        self.buf.extend_from_slice(v);
    }

    pub fn put_opt_bytes(&mut self, v: Option<&[u8]>) {
        match v {
            None => self.put_u8(0),
            Some(b) => {
                self.put_u8(1);
                self.put_bytes(b);
            }
        }
    }

    pub fn put_opt_u64(&mut self, v: Option<u64>) {
        match v {
            None => self.put_u8(0),
            Some(x) => {
                self.put_u8(1);
                self.put_u64(x);
            }
        }
    }

    pub fn put_node(&mut self, id: NodeId) {
        self.put_array(&id.to_wire());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor-based decoder; every getter fails cleanly on truncation.
pub struct WireReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> WireReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn get_u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn get_u16(&mut self) -> Result<u16, WireError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn get_u32(&mut self) -> Result<u32, WireError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn get_u64(&mut self) -> Result<u64, WireError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub fn get_bool(&mut self) -> Result<bool, WireError> {
        match self.get_u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(WireError::BadLength),
        }
    }

    pub fn get_bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let len = self.get_u32()? as usize;
        if len > self.remaining() {
            return Err(WireError::BadLength);
        }
        Ok(self.take(len)?.to_vec())
    }

    pub fn get_array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        let b = self.take(N)?;
        let mut a = [0u8; N];
        a.copy_from_slice(b);
        Ok(a)
    }

    pub fn get_opt_bytes(&mut self) -> Result<Option<Vec<u8>>, WireError> {
        match self.get_u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.get_bytes()?)),
            _ => Err(WireError::BadLength),
        }
    }

    pub fn get_opt_u64(&mut self) -> Result<Option<u64>, WireError> {
        match self.get_u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.get_u64()?)),
            _ => Err(WireError::BadLength),
        }
    }

    pub fn get_node(&mut self) -> Result<NodeId, WireError> {
        let raw = self.get_array::<3>()?;
        NodeId::from_wire(raw).ok_or(WireError::BadNodeId)
    }

    /// Fails unless the whole buffer was consumed.
    pub fn expect_end(&self) -> Result<(), WireError> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(WireError::Trailing)
        }
    }
}

/// Anything that travels on the transport, as a standalone buffer via
/// [`WireEncode::encode`] or nested inside a larger message via
/// [`WireEncode::encode_into`].
pub trait WireEncode {
    fn encode_into(&self, w: &mut WireWriter);

    fn encode(&self) -> Vec<u8> {
        let mut w = WireWriter::new();
        self.encode_into(&mut w);
        w.finish()
    }
}

/// Counterpart of [`WireEncode`]. `decode` consumes a full buffer;
/// `decode_from` reads one value out of a larger stream.
pub trait WireDecode: Sized {
    fn decode_from(r: &mut WireReader<'_>) -> Result<Self, WireError>;

    fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = WireReader::new(bytes);
        let v = Self::decode_from(&mut r)?;
        r.expect_end()?;
        Ok(v)
    }
}

impl<T: WireEncode> WireEncode for Vec<T> {
    fn encode_into(&self, w: &mut WireWriter) {
        w.put_u32(self.len() as u32);
        for item in self {
            item.encode_into(w);
        }
    }
}

impl<T: WireDecode> WireDecode for Vec<T> {
    fn decode_from(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        let n = r.get_u32()? as usize;
        // Cap pre-allocation at what the buffer could possibly hold so a
        // forged count cannot balloon memory; decoding then fails naturally
        // with Truncated.
        let mut out = Vec::with_capacity(n.min(r.remaining()));
        for _ in 0..n {
            out.push(T::decode_from(r)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn scalar_roundtrip(a: u64, b: u32, c: u8, flag: bool, bytes: Vec<u8>, opt: Option<Vec<u8>>) {
            let mut w = WireWriter::new();
            w.put_u64(a);
            w.put_u32(b);
            w.put_u8(c);
            w.put_bool(flag);
            w.put_bytes(&bytes);
            w.put_opt_bytes(opt.as_deref());
            let buf = w.finish();
            let mut r = WireReader::new(&buf);
            prop_assert_eq!(r.get_u64().unwrap(), a);
            prop_assert_eq!(r.get_u32().unwrap(), b);
            prop_assert_eq!(r.get_u8().unwrap(), c);
            prop_assert_eq!(r.get_bool().unwrap(), flag);
            prop_assert_eq!(r.get_bytes().unwrap(), bytes);
            prop_assert_eq!(r.get_opt_bytes().unwrap(), opt);
            prop_assert!(r.expect_end().is_ok());
        }
    }

    #[test]
    fn truncation_is_an_error_not_a_panic() {
        let mut w = WireWriter::new();
        w.put_bytes(b"hello");
        let buf = w.finish();
        let mut r = WireReader::new(&buf[..3]);
        assert_eq!(r.get_bytes(), Err(WireError::Truncated));
    }

    #[test]
    fn oversized_length_rejected() {
        // Claims 1000 bytes but carries 2.
        let mut buf = 1000u32.to_le_bytes().to_vec();
        buf.extend_from_slice(&[1, 2]);
        let mut r = WireReader::new(&buf);
        assert_eq!(r.get_bytes(), Err(WireError::BadLength));
    }
}
