//! Handshake message codec.
//!
//! Every message is `type (1) ‖ body length (2, big-endian) ‖ body`. A flight
//! is a plain concatenation of messages.
//!
//! | tag  | message            | body                                         |
//! |------|--------------------|----------------------------------------------|
//! | 0x01 | ClientHello        | nonce (32) ‖ cookie length (0 or 16) ‖ cookie |
//! | 0x02 | HelloVerifyRequest | cookie (16)                                  |
//! | 0x03 | ServerHello        | nonce (32)                                   |
//! | 0x04 | Certificate        | encoded certificate                          |
//! | 0x05 | KeyExchange        | len16 ‖ ephemeral point ‖ len16 ‖ signature  |
//! | 0x06 | CertificateVerify  | signature                                    |
//! | 0x07 | Finished           | verify MAC (32)                              |
//! | 0x08 | Abort              | reason code (1)                              |

use super::{COOKIE_LEN, MAC_LEN, NONCE_LEN};
use crate::registry::Reader;
use serde::Serialize;
use thiserror::Error;

pub const TAG_CLIENT_HELLO: u8 = 0x01;
pub const TAG_HELLO_VERIFY_REQUEST: u8 = 0x02;
pub const TAG_SERVER_HELLO: u8 = 0x03;
pub const TAG_CERTIFICATE: u8 = 0x04;
pub const TAG_KEY_EXCHANGE: u8 = 0x05;
pub const TAG_CERTIFICATE_VERIFY: u8 = 0x06;
pub const TAG_FINISHED: u8 = 0x07;
pub const TAG_ABORT: u8 = 0x08;

const HEADER_LEN: usize = 3;

/// One-byte reason carried by an `Abort` message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    BadCookie = 0x01,
    BadCertificate = 0x02,
    BadSignature = 0x03,
    BadFinished = 0x04,
    WrongPhase = 0x05,
    MalformedMessage = 0x06,
    Timeout = 0x07,
}

impl AbortReason {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0x01 => AbortReason::BadCookie,
            0x02 => AbortReason::BadCertificate,
            0x03 => AbortReason::BadSignature,
            0x04 => AbortReason::BadFinished,
            0x05 => AbortReason::WrongPhase,
            0x06 => AbortReason::MalformedMessage,
            0x07 => AbortReason::Timeout,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum HandshakeMessage {
    ClientHello {
        client_nonce: [u8; NONCE_LEN],
        cookie: Option<[u8; COOKIE_LEN]>,
    },
    HelloVerifyRequest {
        cookie: [u8; COOKIE_LEN],
    },
    ServerHello {
        server_nonce: [u8; NONCE_LEN],
    },
    Certificate {
        certificate: Vec<u8>,
    },
    KeyExchange {
        ephemeral_public: Vec<u8>,
        signature: Vec<u8>,
    },
    CertificateVerify {
        signature: Vec<u8>,
    },
    Finished {
        verify_mac: [u8; MAC_LEN],
    },
    Abort {
        reason: AbortReason,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed handshake message: {0}")]
pub struct DecodeError(pub String);

fn fixed<const N: usize>(bytes: &[u8]) -> [u8; N] {
    bytes.try_into().expect("caller checked length")
}

impl HandshakeMessage {
    pub fn tag(&self) -> u8 {
        match self {
            HandshakeMessage::ClientHello { .. } => TAG_CLIENT_HELLO,
            HandshakeMessage::HelloVerifyRequest { .. } => TAG_HELLO_VERIFY_REQUEST,
            HandshakeMessage::ServerHello { .. } => TAG_SERVER_HELLO,
            HandshakeMessage::Certificate { .. } => TAG_CERTIFICATE,
            HandshakeMessage::KeyExchange { .. } => TAG_KEY_EXCHANGE,
            HandshakeMessage::CertificateVerify { .. } => TAG_CERTIFICATE_VERIFY,
            HandshakeMessage::Finished { .. } => TAG_FINISHED,
            HandshakeMessage::Abort { .. } => TAG_ABORT,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HandshakeMessage::ClientHello { .. } => "ClientHello",
            HandshakeMessage::HelloVerifyRequest { .. } => "HelloVerifyRequest",
            HandshakeMessage::ServerHello { .. } => "ServerHello",
            HandshakeMessage::Certificate { .. } => "Certificate",
            HandshakeMessage::KeyExchange { .. } => "KeyExchange",
            HandshakeMessage::CertificateVerify { .. } => "CertificateVerify",
            HandshakeMessage::Finished { .. } => "Finished",
            HandshakeMessage::Abort { .. } => "Abort",
        }
    }

    fn body(&self) -> Vec<u8> {
        match self {
            HandshakeMessage::ClientHello { client_nonce, cookie } => {
                let mut b = client_nonce.to_vec();
                match cookie {
                    Some(c) => {
                        b.push(COOKIE_LEN as u8);
                        b.extend(c);
                    }
                    None => b.push(0),
                }
                b
            }
            HandshakeMessage::HelloVerifyRequest { cookie } => cookie.to_vec(),
            HandshakeMessage::ServerHello { server_nonce } => server_nonce.to_vec(),
            HandshakeMessage::Certificate { certificate } => certificate.clone(),
            HandshakeMessage::KeyExchange {
                ephemeral_public,
                signature,
            } => {
                let mut b = Vec::with_capacity(4 + ephemeral_public.len() + signature.len());
                b.extend((ephemeral_public.len() as u16).to_be_bytes());
                b.extend(ephemeral_public);
                b.extend((signature.len() as u16).to_be_bytes());
                b.extend(signature);
                b
            }
            HandshakeMessage::CertificateVerify { signature } => signature.clone(),
            HandshakeMessage::Finished { verify_mac } => verify_mac.to_vec(),
            HandshakeMessage::Abort { reason } => vec![reason.code()],
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let body = self.body();
        assert!(body.len() <= u16::MAX as usize, "handshake body too long");
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.push(self.tag());
        out.extend((body.len() as u16).to_be_bytes());
        out.extend(body);
        out
    }

    /// Decodes exactly one message; trailing bytes are an error.
    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let (msg, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(DecodeError(format!(
                "{} trailing bytes after message",
                bytes.len() - used
            )));
        }
        Ok(msg)
    }

    /// Decodes the message at the start of `bytes`, returning it and its length.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize), DecodeError> {
        if bytes.len() < HEADER_LEN {
            return Err(DecodeError("truncated header".into()));
        }
        let tag = bytes[0];
        let len = u16::from_be_bytes([bytes[1], bytes[2]]) as usize;
        let body = bytes
            .get(HEADER_LEN..HEADER_LEN + len)
            .ok_or_else(|| DecodeError(format!("body length {len} exceeds datagram")))?;
        let exact = |n: usize| {
            if body.len() == n {
                Ok(())
            } else {
                Err(DecodeError(format!(
                    "tag {tag:#04x} body must be {n} bytes, got {}",
                    body.len()
                )))
            }
        };
        let msg = match tag {
            TAG_CLIENT_HELLO => {
                if body.len() < NONCE_LEN + 1 {
                    return Err(DecodeError("truncated ClientHello".into()));
                }
                let cookie_len = body[NONCE_LEN] as usize;
                let cookie = match cookie_len {
                    0 => {
                        exact(NONCE_LEN + 1)?;
                        None
                    }
                    COOKIE_LEN => {
                        exact(NONCE_LEN + 1 + COOKIE_LEN)?;
                        Some(fixed(&body[NONCE_LEN + 1..]))
                    }
                    n => return Err(DecodeError(format!("cookie length {n}"))),
                };
                HandshakeMessage::ClientHello {
                    client_nonce: fixed(&body[..NONCE_LEN]),
                    cookie,
                }
            }
            TAG_HELLO_VERIFY_REQUEST => {
                exact(COOKIE_LEN)?;
                HandshakeMessage::HelloVerifyRequest { cookie: fixed(body) }
            }
            TAG_SERVER_HELLO => {
                exact(NONCE_LEN)?;
                HandshakeMessage::ServerHello {
                    server_nonce: fixed(body),
                }
            }
            TAG_CERTIFICATE => {
                if body.is_empty() {
                    return Err(DecodeError("empty certificate".into()));
                }
                HandshakeMessage::Certificate {
                    certificate: body.to_vec(),
                }
            }
            TAG_KEY_EXCHANGE => {
                let mut r = Reader::new(body);
                let short = || DecodeError("truncated KeyExchange".into());
                let plen = r.u16().ok_or_else(short)? as usize;
                let ephemeral_public = r.take(plen).ok_or_else(short)?.to_vec();
                let slen = r.u16().ok_or_else(short)? as usize;
                let signature = r.take(slen).ok_or_else(short)?.to_vec();
                if !r.is_empty() {
                    return Err(DecodeError("trailing bytes in KeyExchange".into()));
                }
                HandshakeMessage::KeyExchange {
                    ephemeral_public,
                    signature,
                }
            }
            TAG_CERTIFICATE_VERIFY => {
                if body.is_empty() {
                    return Err(DecodeError("empty CertificateVerify".into()));
                }
                HandshakeMessage::CertificateVerify {
                    signature: body.to_vec(),
                }
            }
            TAG_FINISHED => {
                exact(MAC_LEN)?;
                HandshakeMessage::Finished {
                    verify_mac: fixed(body),
                }
            }
            TAG_ABORT => {
                exact(1)?;
                let reason = AbortReason::from_code(body[0])
                    .ok_or_else(|| DecodeError(format!("unknown abort reason {:#04x}", body[0])))?;
                HandshakeMessage::Abort { reason }
            }
            other => return Err(DecodeError(format!("unknown message type {other:#04x}"))),
        };
        Ok((msg, HEADER_LEN + len))
    }
}

pub fn encode_flight(messages: &[HandshakeMessage]) -> Vec<u8> {
    messages.iter().flat_map(HandshakeMessage::encode).collect()
}

/// Splits a datagram into its messages. Empty datagrams are rejected.
pub fn decode_flight(mut bytes: &[u8]) -> Result<Vec<HandshakeMessage>, DecodeError> {
    if bytes.is_empty() {
        return Err(DecodeError("empty flight".into()));
    }
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (msg, used) = HandshakeMessage::decode_prefix(bytes)?;
        out.push(msg);
        bytes = &bytes[used..];
    }
    Ok(out)
}

/// Position of a flight in the six-flight exchange, inferred from its first
/// message: 1 ClientHello, 2 HelloVerifyRequest, 3 ClientHello with cookie,
/// 4 ServerHello…, 5 Certificate…, 6 lone Finished.
pub fn flight_number(messages: &[HandshakeMessage]) -> Option<u8> {
    match messages.first()? {
        HandshakeMessage::ClientHello { cookie: None, .. } => Some(1),
        HandshakeMessage::HelloVerifyRequest { .. } => Some(2),
        HandshakeMessage::ClientHello { cookie: Some(_), .. } => Some(3),
        HandshakeMessage::ServerHello { .. } => Some(4),
        HandshakeMessage::Certificate { .. } => Some(5),
        HandshakeMessage::Finished { .. } if messages.len() == 1 => Some(6),
        _ => None,
    }
}
