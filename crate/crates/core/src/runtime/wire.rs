//! `SVBW` framing: `magic[4] | version u16 | type u8 | body_len u32 | body`,
//! all little-endian.

use std::io::{Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SVBW";
pub const PROTOCOL_VERSION: u16 = 1;
pub const FRAME_HEADER_LEN: usize = 11;
/// Largest body a peer will accept.
pub const MAX_BODY_LEN: usize = 16 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    Version(u16),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("body of {0} bytes exceeds the frame limit")]
    TooLarge(usize),
    #[error("malformed {kind} body: {reason}")]
    Malformed { kind: &'static str, reason: String },
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    TableHash = 2,
    InferRequest = 3,
    InferResponse = 4,
    Error = 5,
}

impl MessageType {
    pub fn from_u8(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            1 => MessageType::Hello,
            2 => MessageType::TableHash,
            3 => MessageType::InferRequest,
            4 => MessageType::InferResponse,
            5 => MessageType::Error,
            other => return Err(WireError::UnknownType(other)),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    Malformed = 1,
    Version = 2,
    HashMismatch = 3,
    Decode = 4,
    Inference = 5,
    Protocol = 6,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<Self> {
        Some(match v {
            1 => ErrorCode::Malformed,
            2 => ErrorCode::Version,
            3 => ErrorCode::HashMismatch,
            4 => ErrorCode::Decode,
            5 => ErrorCode::Inference,
            6 => ErrorCode::Protocol,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WireMessage {
    Hello { version: u16, table_hash: [u8; 8] },
    TableHash([u8; 8]),
    /// Serialized `CodedPayload`.
    InferRequest(Vec<u8>),
    InferResponse {
        class: u16,
        logits: Option<Vec<f32>>,
        server_us: u32,
    },
    Error { code: u16, message: String },
}

fn malformed(kind: &'static str, reason: impl Into<String>) -> WireError {
    WireError::Malformed {
        kind,
        reason: reason.into(),
    }
}

impl WireMessage {
    pub fn message_type(&self) -> MessageType {
        match self {
            WireMessage::Hello { .. } => MessageType::Hello,
            WireMessage::TableHash(_) => MessageType::TableHash,
            WireMessage::InferRequest(_) => MessageType::InferRequest,
            WireMessage::InferResponse { .. } => MessageType::InferResponse,
            WireMessage::Error { .. } => MessageType::Error,
        }
    }

    pub fn body(&self) -> Vec<u8> {
        match self {
            WireMessage::Hello { version, table_hash } => {
                let mut b = version.to_le_bytes().to_vec();
                b.extend_from_slice(table_hash);
                b
            }
            WireMessage::TableHash(h) => h.to_vec(),
            WireMessage::InferRequest(p) => p.clone(),
            WireMessage::InferResponse {
                class,
                logits,
                server_us,
            } => {
                let mut b = class.to_le_bytes().to_vec();
                match logits {
                    Some(l) => {
                        b.push(1);
                        b.extend_from_slice(&(l.len() as u16).to_le_bytes());
                        for v in l {
                            b.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                    None => b.push(0),
                }
                b.extend_from_slice(&server_us.to_le_bytes());
                b
            }
            WireMessage::Error { code, message } => {
                let mut b = code.to_le_bytes().to_vec();
                b.extend_from_slice(message.as_bytes());
                b
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body = self.body();
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + body.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
        out.push(self.message_type() as u8);
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_body(kind: MessageType, body: &[u8]) -> Result<Self, WireError> {
        match kind {
            MessageType::Hello => {
                if body.len() != 10 {
                    return Err(malformed("HELLO", format!("{} bytes, expected 10", body.len())));
                }
                Ok(WireMessage::Hello {
                    version: u16::from_le_bytes([body[0], body[1]]),
                    table_hash: body[2..10].try_into().expect("8 bytes"),
                })
            }
            MessageType::TableHash => {
                let h: [u8; 8] = body
                    .try_into()
                    .map_err(|_| malformed("TABLE_HASH", format!("{} bytes, expected 8", body.len())))?;
                Ok(WireMessage::TableHash(h))
            }
            MessageType::InferRequest => Ok(WireMessage::InferRequest(body.to_vec())),
            MessageType::InferResponse => {
                let kind = "INFER_RESPONSE";
                if body.len() < 7 {
                    return Err(malformed(kind, "too short"));
                }
                let class = u16::from_le_bytes([body[0], body[1]]);
                let (logits, rest) = match body[2] {
                    0 => (None, &body[3..]),
                    1 => {
                        if body.len() < 5 {
                            return Err(malformed(kind, "missing logit count"));
                        }
                        let n = u16::from_le_bytes([body[3], body[4]]) as usize;
                        let end = 5 + 4 * n;
                        if body.len() < end {
                            return Err(malformed(kind, "logits truncated"));
                        }
                        let l = body[5..end]
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                            .collect();
                        (Some(l), &body[end..])
                    }
                    f => return Err(malformed(kind, format!("logit flag {f}"))),
                };
                let t: [u8; 4] = rest
                    .try_into()
                    .map_err(|_| malformed(kind, "bad timing field"))?;
                Ok(WireMessage::InferResponse {
                    class,
                    logits,
                    server_us: u32::from_le_bytes(t),
                })
            }
            MessageType::Error => {
                if body.len() < 2 {
                    return Err(malformed("ERROR", "missing code"));
                }
                Ok(WireMessage::Error {
                    code: u16::from_le_bytes([body[0], body[1]]),
                    message: String::from_utf8_lossy(&body[2..]).into_owned(),
                })
            }
        }
    }

    /// Parses one frame from the start of `bytes`, returning the message and
    /// the bytes consumed.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize), WireError> {
        if bytes.len() < FRAME_HEADER_LEN {
            return Err(WireError::Closed);
        }
        let header: [u8; FRAME_HEADER_LEN] = bytes[..FRAME_HEADER_LEN].try_into().expect("header");
        let (kind, len) = parse_header(&header)?;
        let end = FRAME_HEADER_LEN + len;
        if bytes.len() < end {
            return Err(WireError::Closed);
        }
        Ok((Self::from_body(kind, &bytes[FRAME_HEADER_LEN..end])?, end))
    }
}

fn parse_header(h: &[u8; FRAME_HEADER_LEN]) -> Result<(MessageType, usize), WireError> {
    let magic: [u8; 4] = h[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([h[4], h[5]]);
    if version != PROTOCOL_VERSION {
        return Err(WireError::Version(version));
    }
    let kind = MessageType::from_u8(h[6])?;
    let len = u32::from_le_bytes(h[7..11].try_into().expect("4 bytes")) as usize;
    if len > MAX_BODY_LEN {
        return Err(WireError::TooLarge(len));
    }
    Ok((kind, len))
}

/// Reads one frame. A peer closing before the first header byte yields
/// `Ok(None)`; closing mid-frame is an error.
pub fn read_message(r: &mut impl Read) -> Result<Option<(WireMessage, usize)>, WireError> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    let mut got = 0;
    while got < FRAME_HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Closed),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (kind, len) = parse_header(&header)?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => WireError::Closed,
        _ => WireError::Io(e),
    })?;
    Ok(Some((WireMessage::from_body(kind, &body)?, len)))
}

/// Writes one frame and returns the body length.
pub fn write_message(w: &mut impl Write, msg: &WireMessage) -> Result<usize, WireError> {
    let bytes = msg.to_bytes();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len() - FRAME_HEADER_LEN)
}
