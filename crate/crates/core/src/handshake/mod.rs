//! Mutually authenticated, cookie-protected handshake over datagrams.
//!
//! Six flights, in the shape of DTLS 1.2 with client authentication (not wire
//! compatible with it):
//!
//! ```text
//! F1 I→R  ClientHello
//! F2 R→I  HelloVerifyRequest(cookie)
//! F3 I→R  ClientHello(cookie)
//! F4 R→I  ServerHello ‖ Certificate ‖ KeyExchange
//! F5 I→R  Certificate ‖ KeyExchange ‖ CertificateVerify ‖ Finished
//! F6 R→I  Finished
//! ```
//!
//! Certificates must verify under the registry root and be currently active in
//! the registry. Key exchange is ephemeral-ephemeral ECDH; static keys only
//! sign. The transcript starts at F3, since the responder keeps no state
//! before the cookie round trip.

mod keys;
mod loopback;
mod message;
mod state;

pub use keys::{derive_session_keys, SessionKeys, KEY_LEN, SESSION_ID_LEN, SESSION_KEYS_LEN};
pub use loopback::{
    provision_pair, run_loopback, FlightRecord, LoopbackOutcome, LoopbackParty, LOOPBACK_CLIENT_ID,
    LOOPBACK_SERVER_ID,
};
pub use message::{decode_flight, encode_flight, flight_number, AbortReason, DecodeError, HandshakeMessage};
pub use state::{DatagramStep, HandshakeConfig, HandshakeState, Identity, Phase, Role, Step};

use crate::hash::hmac_sha256;
use serde::Serialize;
use thiserror::Error;

pub const NONCE_LEN: usize = 32;
pub const COOKIE_LEN: usize = 16;
pub const MAC_LEN: usize = 32;
pub const DEFAULT_MAX_RETRANSMITS: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HandshakeError {
    #[error("cookie does not match the initiator address and nonce")]
    BadCookie,
    #[error("peer certificate rejected: {0}")]
    BadCertificate(String),
    #[error("signature verification failed")]
    BadSignature,
    #[error("finished MAC does not match the transcript")]
    BadFinished,
    #[error("{0} not expected in phase {1:?}")]
    WrongPhase(&'static str, Phase),
    #[error("malformed handshake message: {0}")]
    MalformedMessage(String),
    #[error("retransmission budget exhausted")]
    Timeout,
    #[error("peer aborted the handshake: {0:?}")]
    PeerAborted(AbortReason),
    #[error("handshake already failed")]
    Closed,
}

impl HandshakeError {
    /// Reason code for the `Abort` this failure sends, if any. Receiving an
    /// abort, or touching an already failed handshake, sends nothing.
    pub fn abort_reason(&self) -> Option<AbortReason> {
        Some(match self {
            HandshakeError::BadCookie => AbortReason::BadCookie,
            HandshakeError::BadCertificate(_) => AbortReason::BadCertificate,
            HandshakeError::BadSignature => AbortReason::BadSignature,
            HandshakeError::BadFinished => AbortReason::BadFinished,
            HandshakeError::WrongPhase(..) => AbortReason::WrongPhase,
            HandshakeError::MalformedMessage(_) => AbortReason::MalformedMessage,
            HandshakeError::Timeout => AbortReason::Timeout,
            HandshakeError::PeerAborted(_) | HandshakeError::Closed => return None,
        })
    }

    pub fn abort_message(&self) -> Option<HandshakeMessage> {
        self.abort_reason()
            .map(|reason| HandshakeMessage::Abort { reason })
    }
}

impl From<DecodeError> for HandshakeError {
    fn from(e: DecodeError) -> Self {
        HandshakeError::MalformedMessage(e.0)
    }
}

/// Stateless anti-DoS cookie: the first 16 bytes of
/// `HMAC(server_secret, initiator_address ‖ client_nonce)`.
pub fn compute_cookie(
    server_secret: &[u8; 32],
    initiator_address: &[u8],
    client_nonce: &[u8],
) -> [u8; COOKIE_LEN] {
    let mac = hmac_sha256(server_secret, &[initiator_address, client_nonce]);
    mac[..COOKIE_LEN].try_into().expect("digest longer than cookie")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn cookie_is_deterministic() {
        let secret = [5u8; 32];
        let a = compute_cookie(&secret, &[10, 0, 0, 1], &[1; 32]);
        assert_eq!(a, compute_cookie(&secret, &[10, 0, 0, 1], &[1; 32]));
        assert_ne!(a, compute_cookie(&[6u8; 32], &[10, 0, 0, 1], &[1; 32]));
        assert_ne!(a, compute_cookie(&secret, &[10, 0, 0, 1], &[2; 32]));
    }

    #[test]
    fn cookie_depends_on_address() {
        let mut rng = ChaCha20Rng::seed_from_u64(100);
        let secret: [u8; 32] = rng.gen();
        let nonce: [u8; 32] = rng.gen();
        for _ in 0..100 {
            let a: [u8; 4] = rng.gen();
            let mut b: [u8; 4] = rng.gen();
            if a == b {
                b[0] ^= 1;
            }
            assert_ne!(
                compute_cookie(&secret, &a, &nonce),
                compute_cookie(&secret, &b, &nonce)
            );
        }
    }

    #[test]
    fn abort_reasons_map() {
        assert_eq!(
            HandshakeError::BadFinished.abort_message(),
            Some(HandshakeMessage::Abort {
                reason: AbortReason::BadFinished
            })
        );
        assert_eq!(
            HandshakeError::PeerAborted(AbortReason::Timeout).abort_reason(),
            None
        );
        assert_eq!(
            HandshakeError::from(DecodeError("x".into())).abort_reason(),
            Some(AbortReason::MalformedMessage)
        );
    }
}
