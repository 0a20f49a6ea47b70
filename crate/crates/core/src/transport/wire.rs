//! Frame layout: 4-byte big-endian length of the rest of the frame, a
//! version byte, a kind byte, an 8-byte big-endian correlation id, then a
//! CBOR body.

use std::io::{self, Read, Write};

use crate::transport::{Fault, Request, Response};
use crate::value::{decode, encode};

pub const VERSION: u8 = 1;
const HEADER: usize = 1 + 1 + 8;
/// Frames larger than this are rejected as corrupt.
pub const MAX_FRAME: usize = 16 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Kind {
    Locate = 1,
    OpenProxy = 2,
    Invoke = 3,
    TxnCtrl = 4,
    Heartbeat = 5,
    Reply = 6,
    Fault = 7,
}

impl Kind {
    pub fn from_byte(b: u8) -> Option<Kind> {
        Some(match b {
            1 => Kind::Locate,
            2 => Kind::OpenProxy,
            3 => Kind::Invoke,
            4 => Kind::TxnCtrl,
            5 => Kind::Heartbeat,
            6 => Kind::Reply,
            7 => Kind::Fault,
            _ => return None,
        })
    }

    pub fn of(request: &Request) -> Kind {
        match request {
            Request::Locate { .. } => Kind::Locate,
            Request::Acquire { .. } | Request::OpenProxy { .. } => Kind::OpenProxy,
            Request::Invoke { .. } => Kind::Invoke,
            Request::Prepare { .. } | Request::Finalize { .. } => Kind::TxnCtrl,
            Request::Heartbeat { .. } => Kind::Heartbeat,
        }
    }

    pub fn is_request(self) -> bool {
        !matches!(self, Kind::Reply | Kind::Fault)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("unsupported frame version {0}")]
    Version(u8),
    #[error("unknown frame kind {0}")]
    Kind(u8),
    #[error("frame of {0} bytes is malformed")]
    Length(usize),
    #[error("bad body: {0}")]
    Body(String),
    #[error("expected a {expected} frame, got {got:?}")]
    Unexpected { expected: &'static str, got: Kind },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: Kind,
    pub correlation: u64,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn request(correlation: u64, request: &Request) -> Result<Frame, WireError> {
        Ok(Frame {
            kind: Kind::of(request),
            correlation,
            body: encode(request).map_err(|e| WireError::Body(e.to_string()))?,
        })
    }

    pub fn reply(correlation: u64, result: &Result<Response, Fault>) -> Result<Frame, WireError> {
        let (kind, body) = match result {
            Ok(r) => (Kind::Reply, encode(r)),
            Err(f) => (Kind::Fault, encode(f)),
        };
        Ok(Frame {
            kind,
            correlation,
            body: body.map_err(|e| WireError::Body(e.to_string()))?,
        })
    }

    pub fn to_request(&self) -> Result<Request, WireError> {
        if !self.kind.is_request() {
            return Err(WireError::Unexpected {
                expected: "request",
                got: self.kind,
            });
        }
        let request: Request = decode(&self.body).map_err(|e| WireError::Body(e.to_string()))?;
        if Kind::of(&request) != self.kind {
            return Err(WireError::Body(format!("{:?} frame carries a {:?} request", self.kind, Kind::of(&request))));
        }
        Ok(request)
    }

    pub fn to_reply(&self) -> Result<Result<Response, Fault>, WireError> {
        let body = |e: crate::value::CodecError| WireError::Body(e.to_string());
        match self.kind {
            Kind::Reply => Ok(Ok(decode(&self.body).map_err(body)?)),
            Kind::Fault => Ok(Err(decode(&self.body).map_err(body)?)),
            other => Err(WireError::Unexpected {
                expected: "reply",
                got: other,
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let len = HEADER + self.body.len();
        let mut out = Vec::with_capacity(4 + len);
        out.extend_from_slice(&(len as u32).to_be_bytes());
        out.push(VERSION);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.correlation.to_be_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    /// Parses exactly one frame.
    pub fn from_bytes(bytes: &[u8]) -> Result<Frame, WireError> {
        let mut cursor = bytes;
        let frame = read_frame(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(WireError::Length(bytes.len()));
        }
        Ok(frame)
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<(), WireError> {
    w.write_all(&frame.to_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<Frame, WireError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if !(HEADER..=MAX_FRAME).contains(&len) {
        return Err(WireError::Length(len));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    if buf[0] != VERSION {
        return Err(WireError::Version(buf[0]));
    }
    let kind = Kind::from_byte(buf[1]).ok_or(WireError::Kind(buf[1]))?;
    let correlation = u64::from_be_bytes(buf[2..10].try_into().expect("8 bytes"));
    Ok(Frame {
        kind,
        correlation,
        body: buf.split_off(HEADER),
    })
}
