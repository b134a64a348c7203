//! Binary framing for federation messages.
//!
//! ```text
//! header   "SGVZ" | version u8 | msg_type u8 | round u32 | payload_len u64
//! payload  message specific, see below
//! trailer  CRC-32 (IEEE) u32 over the payload bytes
//! ```
//!
//! Integers are little-endian. Payloads:
//!
//! - Hello (1): `node_id u16, task (u16 len + UTF-8), sample_count u64`
//! - GlobalParams (2): `snapshot`
//! - ClientUpdate (3): `node_id u16, sample_count u64, snapshot`
//! - Shutdown (4): empty
//!
//! A snapshot is `tensor_count u32` followed by, per tensor in name order,
//! `name (u16 len + UTF-8), block_tag u8 (0 representation, 1 task),
//! ndim u8, dims u32 × ndim, dtype u8 (0 = f32), raw f32 data`.

use thiserror::Error;

use crate::nn::{BlockTag, ParamSnapshot, SnapshotEntry};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SGVZ";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;
pub const CRC_LEN: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("wire version {got}, expected {VERSION}")]
    VersionMismatch { got: u8 },
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("crc mismatch: frame says {expected:08x}, payload hashes to {actual:08x}")]
    Crc { expected: u32, actual: u32 },
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("name of {0} bytes exceeds 65535")]
    NameTooLong(usize),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Hello {
        node_id: u16,
        task: String,
        sample_count: u64,
    },
    GlobalParams {
        round: u32,
        snapshot: ParamSnapshot,
    },
    ClientUpdate {
        round: u32,
        node_id: u16,
        sample_count: u64,
        snapshot: ParamSnapshot,
    },
    Shutdown {
        round: u32,
    },
}

impl Message {
    pub fn type_code(&self) -> u8 {
        match self {
            Message::Hello { .. } => 1,
            Message::GlobalParams { .. } => 2,
            Message::ClientUpdate { .. } => 3,
            Message::Shutdown { .. } => 4,
        }
    }

    pub fn round(&self) -> u32 {
        match self {
            Message::Hello { .. } => 0,
            Message::GlobalParams { round, .. }
            | Message::ClientUpdate { round, .. }
            | Message::Shutdown { round } => *round,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "Hello",
            Message::GlobalParams { .. } => "GlobalParams",
            Message::ClientUpdate { .. } => "ClientUpdate",
            Message::Shutdown { .. } => "Shutdown",
        }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), CodecError> {
    let len = u16::try_from(s.len()).map_err(|_| CodecError::NameTooLong(s.len()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Snapshot body as laid out on the wire.
pub fn encode_snapshot(snapshot: &ParamSnapshot, out: &mut Vec<u8>) -> Result<(), CodecError> {
    let count = u32::try_from(snapshot.len()).map_err(|_| CodecError::Malformed("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in snapshot.entries() {
        put_str(out, &e.name)?;
        out.push(u8::from(!e.tag.is_representation()));
        let shape = e.tensor.shape();
        let ndim = u8::try_from(shape.len()).map_err(|_| CodecError::Malformed(format!("{} has rank > 255", e.name)))?;
        out.push(ndim);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| CodecError::Malformed(format!("{} has a dim > u32", e.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(0);
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

pub fn encode_message(msg: &Message) -> Result<Vec<u8>, CodecError> {
    let mut payload = Vec::new();
    match msg {
        Message::Hello {
            node_id,
            task,
            sample_count,
        } => {
            payload.extend_from_slice(&node_id.to_le_bytes());
            put_str(&mut payload, task)?;
            payload.extend_from_slice(&sample_count.to_le_bytes());
        }
        Message::GlobalParams { snapshot, .. } => encode_snapshot(snapshot, &mut payload)?,
        Message::ClientUpdate {
            node_id,
            sample_count,
            snapshot,
            ..
        } => {
            payload.extend_from_slice(&node_id.to_le_bytes());
            payload.extend_from_slice(&sample_count.to_le_bytes());
            encode_snapshot(snapshot, &mut payload)?;
        }
        Message::Shutdown { .. } => {}
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + CRC_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.type_code());
    out.extend_from_slice(&msg.round().to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

/// Fields of a validated header.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Header {
    pub msg_type: u8,
    pub round: u32,
    pub payload_len: u64,
}

pub fn decode_header(bytes: &[u8]) -> Result<Header, CodecError> {
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != MAGIC {
        return Err(CodecError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(CodecError::VersionMismatch { got: bytes[4] });
    }
    let msg_type = bytes[5];
    if !(1..=4).contains(&msg_type) {
        return Err(CodecError::UnknownType(msg_type));
    }
    Ok(Header {
        msg_type,
        round: u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")),
        payload_len: u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes")),
    })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() - self.pos < n {
            return Err(CodecError::Malformed(format!(
                "payload ends at byte {} while reading {n} more",
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CodecError> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| CodecError::Malformed("name is not UTF-8".into()))
    }

    fn snapshot(&mut self) -> Result<ParamSnapshot, CodecError> {
        let count = self.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut prev: Option<String> = None;
        for _ in 0..count {
            let name = self.string()?;
            if prev.as_ref().is_some_and(|p| *p >= name) {
                return Err(CodecError::Malformed(format!("tensor {name:?} out of name order")));
            }
            let tag = BlockTag::for_name(&name);
            let wire_tag = self.u8()?;
            if wire_tag > 1 || (wire_tag == 1) == tag.is_representation() {
                return Err(CodecError::Malformed(format!("block tag {wire_tag} does not match {name:?}")));
            }
            let ndim = self.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u32()? as usize);
            }
            let dtype = self.u8()?;
            if dtype != 0 {
                return Err(CodecError::Malformed(format!("unsupported dtype {dtype}")));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CodecError::Malformed(format!("{name:?} shape overflows")))?;
            let data = self
                .take(numel)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(&shape, data).map_err(|e| CodecError::Malformed(e.to_string()))?;
            prev = Some(name.clone());
            entries.push(SnapshotEntry { name, tag, tensor });
        }
        ParamSnapshot::new(entries).map_err(|e| CodecError::Malformed(e.to_string()))
    }
}

pub fn decode_snapshot(payload: &[u8]) -> Result<ParamSnapshot, CodecError> {
    let mut c = Cursor { buf: payload, pos: 0 };
    let snap = c.snapshot()?;
    finish(&c)?;
    Ok(snap)
}

fn finish(c: &Cursor) -> Result<(), CodecError> {
    if c.pos != c.buf.len() {
        return Err(CodecError::Malformed(format!("{} unread payload bytes", c.buf.len() - c.pos)));
    }
    Ok(())
}

/// Total frame length announced by a header.
pub fn frame_len(header: &Header) -> Result<usize, CodecError> {
    usize::try_from(header.payload_len)
        .ok()
        .and_then(|n| n.checked_add(HEADER_LEN + CRC_LEN))
        .ok_or_else(|| CodecError::Malformed("payload length overflows".into()))
}

pub fn decode_message(bytes: &[u8]) -> Result<Message, CodecError> {
    let header = decode_header(bytes)?;
    let total = frame_len(&header)?;
    if bytes.len() < total {
        return Err(CodecError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    if bytes.len() > total {
        return Err(CodecError::Malformed(format!("{} bytes after frame", bytes.len() - total)));
    }
    let payload = &bytes[HEADER_LEN..total - CRC_LEN];
    let expected = u32::from_le_bytes(bytes[total - CRC_LEN..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if expected != actual {
        return Err(CodecError::Crc { expected, actual });
    }
    let mut c = Cursor { buf: payload, pos: 0 };
    let round = header.round;
    let msg = match header.msg_type {
        1 => Message::Hello {
            node_id: c.u16()?,
            task: c.string()?,
            sample_count: c.u64()?,
        },
        2 => Message::GlobalParams {
            round,
            snapshot: c.snapshot()?,
        },
        3 => Message::ClientUpdate {
            round,
            node_id: c.u16()?,
            sample_count: c.u64()?,
            snapshot: c.snapshot()?,
        },
        _ => Message::Shutdown { round },
    };
    finish(&c)?;
    Ok(msg)
}
