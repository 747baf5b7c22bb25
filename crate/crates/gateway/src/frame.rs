//! Length-prefixed wire frames.
//!
//! Layout, all integers big-endian:
//!
//! ```text
//! +----------------+---------+--------------------+-------------+
//! | body length u32| kind u8 | correlation id u64 | body bytes  |
//! +----------------+---------+--------------------+-------------+
//! ```
//!
//! The body is UTF-8 JSON for every kind the gateway itself produces, but the
//! codec treats it as opaque bytes.

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

pub const HEADER_LEN: usize = 13;
/// Upper bound on a body, to refuse absurd length prefixes early.
pub const MAX_BODY: usize = 16 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Kind {
    Acquire = 1,
    Acquired = 2,
    Heartbeat = 3,
    Release = 4,
    Step = 5,
    Observation = 6,
    Verify = 7,
    Result = 8,
    Error = 9,
}

impl Kind {
    pub const ALL: [Kind; 9] = [
        Kind::Acquire,
        Kind::Acquired,
        Kind::Heartbeat,
        Kind::Release,
        Kind::Step,
        Kind::Observation,
        Kind::Verify,
        Kind::Result,
        Kind::Error,
    ];

    pub fn from_code(code: u8) -> Option<Kind> {
        Self::ALL.into_iter().find(|k| *k as u8 == code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: Kind,
    pub correlation_id: u64,
    pub body: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("need {0} more bytes")]
    Incomplete(usize),
    #[error("body of {0} bytes exceeds the frame limit")]
    TooLarge(usize),
    #[error("unknown frame kind {code}")]
    UnknownKind { code: u8, correlation_id: u64 },
    #[error("malformed body: {0}")]
    Body(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Header fields of an encoded frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub body_len: usize,
    pub code: u8,
    pub correlation_id: u64,
}

impl Header {
    pub fn parse(bytes: &[u8]) -> Result<Header, FrameError> {
        if bytes.len() < HEADER_LEN {
            return Err(FrameError::Incomplete(HEADER_LEN - bytes.len()));
        }
        let body_len = u32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        if body_len > MAX_BODY {
            return Err(FrameError::TooLarge(body_len));
        }
        Ok(Header {
            body_len,
            code: bytes[4],
            correlation_id: u64::from_be_bytes(bytes[5..13].try_into().expect("8 bytes")),
        })
    }

    pub fn kind(&self) -> Result<Kind, FrameError> {
        Kind::from_code(self.code).ok_or(FrameError::UnknownKind { code: self.code, correlation_id: self.correlation_id })
    }
}

impl Frame {
    pub fn new(kind: Kind, correlation_id: u64, body: impl Into<Vec<u8>>) -> Self {
        Self { kind, correlation_id, body: body.into() }
    }

    pub fn json(kind: Kind, correlation_id: u64, body: &impl Serialize) -> Self {
        Self::new(kind, correlation_id, serde_json::to_vec(body).expect("message serializes"))
    }

    pub fn parse_body<T: DeserializeOwned>(&self) -> Result<T, FrameError> {
        serde_json::from_slice(&self.body).map_err(|e| FrameError::Body(e.to_string()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.body.len());
        out.extend_from_slice(&(self.body.len() as u32).to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.correlation_id.to_be_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    /// Decode one frame from the front of `bytes`, returning it and the bytes used.
    pub fn decode(bytes: &[u8]) -> Result<(Frame, usize), FrameError> {
        let h = Header::parse(bytes)?;
        let total = HEADER_LEN + h.body_len;
        if bytes.len() < total {
            return Err(FrameError::Incomplete(total - bytes.len()));
        }
        let kind = h.kind()?;
        Ok((Frame::new(kind, h.correlation_id, &bytes[HEADER_LEN..total]), total))
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    w.write_all(&frame.encode())?;
    w.flush()
}

/// Blocking read of one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>, FrameError> {
    let mut head = [0u8; HEADER_LEN];
    match r.read_exact(&mut head) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let h = Header::parse(&head)?;
    let mut body = vec![0u8; h.body_len];
    r.read_exact(&mut body)?;
    Ok(Some(Frame::new(h.kind()?, h.correlation_id, body)))
}

/// Read one encoded frame as a single buffer, header included, without
/// interpreting its kind. `Ok(None)` on a clean end of stream.
pub async fn read_raw(r: &mut (impl AsyncRead + Unpin)) -> Result<Option<(Header, Vec<u8>)>, FrameError> {
    let mut buf = vec![0u8; HEADER_LEN];
    match r.read_exact(&mut buf).await {
        Ok(_) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let h = Header::parse(&buf)?;
    buf.resize(HEADER_LEN + h.body_len, 0);
    r.read_exact(&mut buf[HEADER_LEN..]).await?;
    Ok(Some((h, buf)))
}

pub async fn write_raw(w: &mut (impl AsyncWrite + Unpin), bytes: &[u8]) -> io::Result<()> {
    w.write_all(bytes).await?;
    w.flush().await
}
