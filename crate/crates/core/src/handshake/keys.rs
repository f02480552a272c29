use crate::hash::sha256;
use std::fmt;

pub const KEY_LEN: usize = 32;
pub const SESSION_ID_LEN: usize = 4;
/// Serialized size: four keys followed by the session id.
pub const SESSION_KEYS_LEN: usize = 4 * KEY_LEN + SESSION_ID_LEN;

/// Traffic keys released by a completed handshake.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKeys {
    pub initiator_write_key: [u8; KEY_LEN],
    pub responder_write_key: [u8; KEY_LEN],
    pub initiator_mac_key: [u8; KEY_LEN],
    pub responder_mac_key: [u8; KEY_LEN],
    pub session_id: [u8; SESSION_ID_LEN],
}

impl fmt::Debug for SessionKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionKeys")
            .field("session_id", &hex::encode(self.session_id))
            .finish_non_exhaustive()
    }
}

impl SessionKeys {
    pub fn to_bytes(&self) -> [u8; SESSION_KEYS_LEN] {
        let mut out = [0u8; SESSION_KEYS_LEN];
        out[..32].copy_from_slice(&self.initiator_write_key);
        out[32..64].copy_from_slice(&self.responder_write_key);
        out[64..96].copy_from_slice(&self.initiator_mac_key);
        out[96..128].copy_from_slice(&self.responder_mac_key);
        out[128..].copy_from_slice(&self.session_id);
        out
    }

    pub fn from_bytes(bytes: &[u8; SESSION_KEYS_LEN]) -> Self {
        let key = |i: usize| -> [u8; KEY_LEN] { bytes[i * 32..(i + 1) * 32].try_into().unwrap() };
        SessionKeys {
            initiator_write_key: key(0),
            responder_write_key: key(1),
            initiator_mac_key: key(2),
            responder_mac_key: key(3),
            session_id: bytes[128..].try_into().unwrap(),
        }
    }
}

/// `master = H(0x01 ‖ secret ‖ client_nonce ‖ server_nonce)`; each key is
/// `H(master ‖ label)` and the session id is the first four bytes of
/// `H(master ‖ "sid")`.
pub fn derive_session_keys(
    shared_secret: &[u8],
    client_nonce: &[u8; 32],
    server_nonce: &[u8; 32],
) -> SessionKeys {
    let master = sha256(&[&[0x01], shared_secret, client_nonce, server_nonce]);
    let expand = |label: &[u8]| sha256(&[&master, label]);
    let sid = expand(b"sid");
    SessionKeys {
        initiator_write_key: expand(b"iwk"),
        responder_write_key: expand(b"rwk"),
        initiator_mac_key: expand(b"imk"),
        responder_mac_key: expand(b"rmk"),
        session_id: [sid[0], sid[1], sid[2], sid[3]],
    }
}
