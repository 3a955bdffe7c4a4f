//! Live-mode framing: `u32` little-endian length, `u8` frame type, then a
//! UTF-8 JSON [`Envelope`]. The length counts the type byte and the payload.

use std::io::{self, Read, Write};

use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use super::{Envelope, Message};

pub const MAX_FRAME: usize = 16 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("empty frame")]
    Empty,
    #[error("unknown frame type {0}")]
    UnknownType(u8),
    #[error("frame type {declared} does not match payload type {actual}")]
    TypeMismatch { declared: u8, actual: u8 },
    #[error("payload: {0}")]
    Payload(#[from] serde_json::Error),
}

pub fn frame_type(msg: &Message) -> u8 {
    match msg {
        Message::Produce { .. } => 1,
        Message::ProduceAck { .. } => 2,
        Message::Fetch { .. } => 3,
        Message::FetchResponse { .. } => 4,
        Message::RequestError { .. } => 5,
        Message::Replicate { .. } => 10,
        Message::ReplicateAck { .. } => 11,
        Message::Heartbeat { .. } => 20,
        Message::ElectionProbe { .. } => 21,
        Message::ProbeReply { .. } => 22,
        Message::LeaderAndIsr { .. } => 23,
        Message::Metadata { .. } => 30,
        Message::MetadataResponse { .. } => 31,
        Message::Register { .. } => 40,
        Message::Renew { .. } => 41,
        Message::LeaseResponse { .. } => 42,
        Message::Lookup { .. } => 43,
        Message::LookupResponse { .. } => 44,
        Message::TimeRequest { .. } => 50,
        Message::TimeResponse { .. } => 51,
    }
}

const KNOWN: [u8; 20] = [1, 2, 3, 4, 5, 10, 11, 20, 21, 22, 23, 30, 31, 40, 41, 42, 43, 44, 50, 51];

pub fn encode(env: &Envelope) -> Result<Vec<u8>, WireError> {
    let payload = serde_json::to_vec(env)?;
    let len = payload.len() + 1;
    if len > MAX_FRAME {
        return Err(WireError::TooLarge(len));
    }
    let mut buf = Vec::with_capacity(len + 4);
    buf.extend_from_slice(&(len as u32).to_le_bytes());
    buf.push(frame_type(&env.msg));
    buf.extend_from_slice(&payload);
    Ok(buf)
}

/// Decodes a frame body (type byte + payload, without the length prefix).
pub fn decode_body(body: &[u8]) -> Result<Envelope, WireError> {
    let (&declared, payload) = body.split_first().ok_or(WireError::Empty)?;
    if !KNOWN.contains(&declared) {
        return Err(WireError::UnknownType(declared));
    }
    let env: Envelope = serde_json::from_slice(payload)?;
    let actual = frame_type(&env.msg);
    if actual != declared {
        return Err(WireError::TypeMismatch { declared, actual });
    }
    Ok(env)
}

fn check_len(len: usize) -> Result<(), WireError> {
    match len {
        0 => Err(WireError::Empty),
        l if l > MAX_FRAME => Err(WireError::TooLarge(l)),
        _ => Ok(()),
    }
}

pub fn write_frame<W: Write>(w: &mut W, env: &Envelope) -> Result<(), WireError> {
    w.write_all(&encode(env)?)?;
    Ok(())
}

/// Returns `Ok(None)` on a clean end of stream at a frame boundary.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Envelope>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    check_len(len)?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    decode_body(&body).map(Some)
}

pub async fn write_frame_async<W: AsyncWrite + Unpin>(w: &mut W, env: &Envelope) -> Result<(), WireError> {
    w.write_all(&encode(env)?).await?;
    Ok(())
}

pub async fn read_frame_async<R: AsyncRead + Unpin>(r: &mut R) -> Result<Option<Envelope>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len).await {
        Ok(_) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    check_len(len)?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).await?;
    decode_body(&body).map(Some)
}
