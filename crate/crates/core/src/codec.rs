//! Canonical binary encodings for payloads and advertisements.
//!
//! All integers are little-endian; floats are IEEE-754 bit patterns in little-endian order.
//!
//! Payload:
//!
//! ```text
//! magic "PRXR" | version u8 | sender u64 | count u32 | count x record
//! record = rater u64 | category u8 | key_len u16 | key bytes (UTF-8)
//!          | value f32 | timestamp u64 | source u8 | hops u8
//! ```
//!
//! Advertisement (32 bytes with the 16-byte token):
//!
//! ```text
//! magic "PX" | version u8 | token_len u8 | issued_at u32 | sender u64 | token bytes
//! ```

use std::fmt;

use thiserror::Error;

use crate::model::{Category, ItemId, RatingRecord, SimTime, Source, UserId};

pub const PAYLOAD_MAGIC: &[u8; 4] = b"PRXR";
pub const ADVERT_MAGIC: &[u8; 2] = b"PX";
pub const VERSION: u8 = 1;
pub const TOKEN_LEN: usize = 16;

pub const PAYLOAD_HEADER_LEN: usize = 4 + 1 + 8 + 4;
const RECORD_FIXED_LEN: usize = 8 + 1 + 2 + 4 + 8 + 1 + 1;
pub const ADVERT_HEADER_LEN: usize = 2 + 1 + 1 + 4;
pub const ADVERT_LEN: usize = ADVERT_HEADER_LEN + 8 + TOKEN_LEN;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("truncated input")]
    Truncated,
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("invalid source code {0}")]
    BadSource(u8),
    #[error("item key is not valid UTF-8 or is empty")]
    BadKey,
    #[error("too many records for a u32 count")]
    TooManyRecords,
    #[error("token length {0} is not {TOKEN_LEN}")]
    BadTokenLen(u8),
    #[error("issue time {0} does not fit the 32-bit advertisement field")]
    TimeOverflow(SimTime),
}

/// Opaque storage token standing in for a shortened public URL.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(pub [u8; TOKEN_LEN]);

impl fmt::Debug for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Token({self})")
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// Serialized length of one record.
pub fn record_len(r: &RatingRecord) -> usize {
    RECORD_FIXED_LEN + r.item.key().len()
}

pub fn payload_len<'a>(records: impl IntoIterator<Item = &'a RatingRecord>) -> usize {
    PAYLOAD_HEADER_LEN + records.into_iter().map(record_len).sum::<usize>()
}

pub fn encode_payload(sender: UserId, records: &[RatingRecord]) -> Result<Vec<u8>, CodecError> {
    let count = u32::try_from(records.len()).map_err(|_| CodecError::TooManyRecords)?;
    let mut out = Vec::with_capacity(payload_len(records));
    out.extend_from_slice(PAYLOAD_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&sender.0.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for r in records {
        let key = r.item.key().as_bytes();
        out.extend_from_slice(&r.rater.0.to_le_bytes());
        out.push(r.item.category.0);
        // ItemId guarantees the key fits in u16
        out.extend_from_slice(&(key.len() as u16).to_le_bytes());
        out.extend_from_slice(key);
        out.extend_from_slice(&r.value.to_le_bytes());
        out.extend_from_slice(&r.timestamp.to_le_bytes());
        out.push(r.source.code());
        out.push(r.hops);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() < n {
            return Err(CodecError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn finish(self) -> Result<(), CodecError> {
        match self.buf.len() {
            0 => Ok(()),
            n => Err(CodecError::Trailing(n)),
        }
    }
}

/// Decodes a payload into its sender and records. Category indices are not checked against an
/// ontology here; value ranges are validated when records are merged.
pub fn decode_payload(bytes: &[u8]) -> Result<(UserId, Vec<RatingRecord>), CodecError> {
    let mut c = Cursor { buf: bytes };
    if c.take(4)? != PAYLOAD_MAGIC {
        return Err(CodecError::BadMagic);
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(CodecError::BadVersion(version));
    }
    let sender = UserId(c.u64()?);
    let count = c.u32()? as usize;
    // every record needs at least RECORD_FIXED_LEN bytes, so cap the preallocation
    let mut records = Vec::with_capacity(count.min(c.buf.len() / RECORD_FIXED_LEN));
    for _ in 0..count {
        let rater = UserId(c.u64()?);
        let category = Category(c.u8()?);
        let key_len = c.u16()? as usize;
        let key = std::str::from_utf8(c.take(key_len)?).map_err(|_| CodecError::BadKey)?;
        let item = ItemId::new(category, key).map_err(|_| CodecError::BadKey)?;
        let value = c.f32()?;
        let timestamp = c.u64()?;
        let code = c.u8()?;
        let source = Source::from_code(code).ok_or(CodecError::BadSource(code))?;
        let hops = c.u8()?;
        records.push(RatingRecord {
            rater,
            item,
            value,
            timestamp,
            source,
            hops,
        });
    }
    c.finish()?;
    Ok((sender, records))
}

pub fn encode_advertisement(
    sender: UserId,
    token: &Token,
    issued_at: SimTime,
) -> Result<Vec<u8>, CodecError> {
    let issued = u32::try_from(issued_at).map_err(|_| CodecError::TimeOverflow(issued_at))?;
    let mut out = Vec::with_capacity(ADVERT_LEN);
    out.extend_from_slice(ADVERT_MAGIC);
    out.push(VERSION);
    out.push(TOKEN_LEN as u8);
    out.extend_from_slice(&issued.to_le_bytes());
    out.extend_from_slice(&sender.0.to_le_bytes());
    out.extend_from_slice(&token.0);
    Ok(out)
}

pub fn decode_advertisement(bytes: &[u8]) -> Result<(UserId, Token, SimTime), CodecError> {
    let mut c = Cursor { buf: bytes };
    if c.take(2)? != ADVERT_MAGIC {
        return Err(CodecError::BadMagic);
    }
    let version = c.u8()?;
    if version != VERSION {
        return Err(CodecError::BadVersion(version));
    }
    let token_len = c.u8()?;
    if token_len as usize != TOKEN_LEN {
        return Err(CodecError::BadTokenLen(token_len));
    }
    let issued_at = SimTime::from(c.u32()?);
    let sender = UserId(c.u64()?);
    let token = Token(c.array()?);
    c.finish()?;
    Ok((sender, token, issued_at))
}
