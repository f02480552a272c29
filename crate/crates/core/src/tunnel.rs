//! Encrypted, authenticated, replay-protected point-to-point tunnels carrying
//! private-address packets.
//!
//! Frame layout (all integers big-endian):
//!
//! ```text
//! 0      2        3            7      15       17           17+n
//! | 56 54 | ver=01 | session_id | seq  | ct_len | ciphertext | tag (32) |
//! ```
//!
//! The ciphertext is the serialized inner packet XORed with a keystream whose
//! block `i` is `SHA-256(write_key ‖ seq ‖ i as u32)`. The tag is
//! `HMAC-SHA-256(write_mac_key, header ‖ ciphertext)`.

use crate::handshake::{Role, SessionKeys, KEY_LEN, SESSION_ID_LEN};
use crate::hash::{hmac_sha256, hmac_sha256_verify, sha256, DIGEST_LEN};
use serde::Serialize;
use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use thiserror::Error;

pub const FRAME_MAGIC: [u8; 2] = [0x56, 0x54];
pub const FRAME_VERSION: u8 = 0x01;
pub const FRAME_HEADER_LEN: usize = 17;
pub const TAG_LEN: usize = DIGEST_LEN;
pub const MAX_PAYLOAD: usize = 1200;
pub const INNER_HEADER_LEN: usize = 8;
pub const REPLAY_WINDOW: u64 = 64;
/// Largest possible encoded frame.
pub const MAX_FRAME_LEN: usize = FRAME_HEADER_LEN + INNER_HEADER_LEN + MAX_PAYLOAD + TAG_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TunnelError {
    #[error("payload of {0} bytes exceeds {MAX_PAYLOAD}")]
    PayloadTooLarge(usize),
    #[error("send sequence space exhausted")]
    SequenceExhausted,
    #[error("bad frame magic")]
    BadMagic,
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("bad frame length: {0}")]
    BadLength(String),
    #[error("frame tag does not verify")]
    BadTag,
    #[error("sequence number {0} already seen or outside the window")]
    Replay(u64),
    #[error("frame belongs to another session")]
    WrongSession,
    #[error("no route to {0}")]
    NoRoute(Ipv4Addr),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InnerPacket {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub payload: Vec<u8>,
}

impl InnerPacket {
    pub fn new(src: Ipv4Addr, dst: Ipv4Addr, payload: impl Into<Vec<u8>>) -> Self {
        InnerPacket {
            src,
            dst,
            payload: payload.into(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(INNER_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.src.octets());
        out.extend_from_slice(&self.dst.octets());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TunnelError> {
        if bytes.len() < INNER_HEADER_LEN || bytes.len() > INNER_HEADER_LEN + MAX_PAYLOAD {
            return Err(TunnelError::BadLength(format!(
                "inner packet of {} bytes",
                bytes.len()
            )));
        }
        let ip = |b: &[u8]| Ipv4Addr::new(b[0], b[1], b[2], b[3]);
        Ok(InnerPacket {
            src: ip(&bytes[..4]),
            dst: ip(&bytes[4..8]),
            payload: bytes[INNER_HEADER_LEN..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TunnelFrame {
    pub session_id: [u8; SESSION_ID_LEN],
    pub seq: u64,
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl TunnelFrame {
    pub fn header_bytes(&self) -> [u8; FRAME_HEADER_LEN] {
        header(&self.session_id, self.seq, self.ciphertext.len())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + self.ciphertext.len() + TAG_LEN);
        out.extend_from_slice(&self.header_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    /// Structural checks only; the tag is checked by the receiving session.
    pub fn decode(bytes: &[u8]) -> Result<Self, TunnelError> {
        if bytes.len() < 2 || bytes[..2] != FRAME_MAGIC {
            return Err(TunnelError::BadMagic);
        }
        match bytes.get(2) {
            Some(&FRAME_VERSION) => {}
            Some(&v) => return Err(TunnelError::BadVersion(v)),
            None => return Err(TunnelError::BadLength("truncated header".into())),
        }
        if bytes.len() < FRAME_HEADER_LEN {
            return Err(TunnelError::BadLength("truncated header".into()));
        }
        let ct_len = u16::from_be_bytes([bytes[15], bytes[16]]) as usize;
        if !(INNER_HEADER_LEN..=INNER_HEADER_LEN + MAX_PAYLOAD).contains(&ct_len) {
            return Err(TunnelError::BadLength(format!("ciphertext length {ct_len}")));
        }
        if bytes.len() != FRAME_HEADER_LEN + ct_len + TAG_LEN {
            return Err(TunnelError::BadLength(format!(
                "{} bytes for ciphertext length {ct_len}",
                bytes.len()
            )));
        }
        let ct_end = FRAME_HEADER_LEN + ct_len;
        Ok(TunnelFrame {
            session_id: bytes[3..7].try_into().expect("sliced to length"),
            seq: u64::from_be_bytes(bytes[7..15].try_into().expect("sliced to length")),
            ciphertext: bytes[FRAME_HEADER_LEN..ct_end].to_vec(),
            tag: bytes[ct_end..].try_into().expect("sliced to length"),
        })
    }
}

fn header(session_id: &[u8; SESSION_ID_LEN], seq: u64, ct_len: usize) -> [u8; FRAME_HEADER_LEN] {
    let mut h = [0u8; FRAME_HEADER_LEN];
    h[..2].copy_from_slice(&FRAME_MAGIC);
    h[2] = FRAME_VERSION;
    h[3..7].copy_from_slice(session_id);
    h[7..15].copy_from_slice(&seq.to_be_bytes());
    h[15..17].copy_from_slice(&(ct_len as u16).to_be_bytes());
    h
}

fn apply_keystream(key: &[u8; KEY_LEN], seq: u64, data: &mut [u8]) {
    let seq = seq.to_be_bytes();
    for (i, chunk) in data.chunks_mut(DIGEST_LEN).enumerate() {
        let block = sha256(&[key, &seq, &(i as u32).to_be_bytes()]);
        for (b, k) in chunk.iter_mut().zip(block) {
            *b ^= k;
        }
    }
}

/// Sliding bitmap over the 64 most recent sequence numbers; bit `i` marks
/// `highest - i` as seen.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayWindow {
    highest: Option<u64>,
    bitmap: u64,
}

impl ReplayWindow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn highest(&self) -> Option<u64> {
        self.highest
    }

    /// Whether `seq` would be accepted. Does not modify the window.
    pub fn check(&self, seq: u64) -> bool {
        match self.highest {
            None => true,
            Some(h) if seq > h => true,
            Some(h) => {
                let behind = h - seq;
                behind < REPLAY_WINDOW && self.bitmap & (1 << behind) == 0
            }
        }
    }

    pub fn mark(&mut self, seq: u64) {
        match self.highest {
            None => {
                self.highest = Some(seq);
                self.bitmap = 1;
            }
            Some(h) if seq > h => {
                let ahead = seq - h;
                self.bitmap = if ahead >= REPLAY_WINDOW {
                    0
                } else {
                    self.bitmap << ahead
                };
                self.bitmap |= 1;
                self.highest = Some(seq);
            }
            Some(h) => {
                let behind = h - seq;
                if behind < REPLAY_WINDOW {
                    self.bitmap |= 1 << behind;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Route {
    pub local: String,
    pub remote: String,
}

impl Route {
    pub fn new(local: impl Into<String>, remote: impl Into<String>) -> Self {
        Route {
            local: local.into(),
            remote: remote.into(),
        }
    }
}

pub struct TunnelSession {
    role: Role,
    session_id: [u8; SESSION_ID_LEN],
    write_key: [u8; KEY_LEN],
    write_mac_key: [u8; KEY_LEN],
    peer_key: [u8; KEY_LEN],
    peer_mac_key: [u8; KEY_LEN],
    send_seq: u64,
    replay: ReplayWindow,
    route: Route,
}

impl std::fmt::Debug for TunnelSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TunnelSession")
            .field("role", &self.role)
            .field("session_id", &hex::encode(self.session_id))
            .field("send_seq", &self.send_seq)
            .field("route", &self.route)
            .finish_non_exhaustive()
    }
}

/// The initiator writes with the initiator keys and reads with the responder
/// keys; the responder is mirrored.
pub fn establish_tunnel(keys: &SessionKeys, role: Role, route: Route) -> TunnelSession {
    let (write_key, write_mac_key, peer_key, peer_mac_key) = match role {
        Role::Initiator => (
            keys.initiator_write_key,
            keys.initiator_mac_key,
            keys.responder_write_key,
            keys.responder_mac_key,
        ),
        Role::Responder => (
            keys.responder_write_key,
            keys.responder_mac_key,
            keys.initiator_write_key,
            keys.initiator_mac_key,
        ),
    };
    TunnelSession {
        role,
        session_id: keys.session_id,
        write_key,
        write_mac_key,
        peer_key,
        peer_mac_key,
        send_seq: 0,
        replay: ReplayWindow::new(),
        route,
    }
}

impl TunnelSession {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn session_id(&self) -> [u8; SESSION_ID_LEN] {
        self.session_id
    }

    pub fn send_seq(&self) -> u64 {
        self.send_seq
    }

    pub fn route(&self) -> &Route {
        &self.route
    }

    pub fn replay_window(&self) -> &ReplayWindow {
        &self.replay
    }

    pub fn encapsulate(&mut self, packet: &InnerPacket) -> Result<TunnelFrame, TunnelError> {
        if packet.payload.len() > MAX_PAYLOAD {
            return Err(TunnelError::PayloadTooLarge(packet.payload.len()));
        }
        if self.send_seq == u64::MAX {
            return Err(TunnelError::SequenceExhausted);
        }
        let seq = self.send_seq;
        let mut ciphertext = packet.to_bytes();
        apply_keystream(&self.write_key, seq, &mut ciphertext);
        let hdr = header(&self.session_id, seq, ciphertext.len());
        let tag = hmac_sha256(&self.write_mac_key, &[&hdr, &ciphertext]);
        self.send_seq += 1;
        Ok(TunnelFrame {
            session_id: self.session_id,
            seq,
            ciphertext,
            tag,
        })
    }

    /// Session, then tag, then replay window. Only a frame passing all three
    /// is marked as seen.
    pub fn decapsulate(&mut self, frame: &TunnelFrame) -> Result<InnerPacket, TunnelError> {
        if frame.session_id != self.session_id {
            return Err(TunnelError::WrongSession);
        }
        let hdr = frame.header_bytes();
        if !hmac_sha256_verify(&self.peer_mac_key, &[&hdr, &frame.ciphertext], &frame.tag) {
            return Err(TunnelError::BadTag);
        }
        if !self.replay.check(frame.seq) {
            return Err(TunnelError::Replay(frame.seq));
        }
        let mut plain = frame.ciphertext.clone();
        apply_keystream(&self.peer_key, frame.seq, &mut plain);
        let packet = InnerPacket::from_bytes(&plain)?;
        self.replay.mark(frame.seq);
        Ok(packet)
    }

    pub fn decapsulate_bytes(&mut self, bytes: &[u8]) -> Result<InnerPacket, TunnelError> {
        self.decapsulate(&TunnelFrame::decode(bytes)?)
    }
}

/// Maps private destination addresses to the endpoint that owns them.
#[derive(Debug, Clone, Default)]
pub struct RoutingTable {
    entries: BTreeMap<Ipv4Addr, String>,
    plan: Option<(Ipv4Addr, u8)>,
    mediator: Option<String>,
}

impl RoutingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, address: Ipv4Addr, endpoint: impl Into<String>) {
        self.entries.insert(address, endpoint.into());
    }

    /// Addresses inside `prefix/len` without an entry go to `mediator`.
    pub fn with_mediator(mut self, prefix: Ipv4Addr, len: u8, mediator: impl Into<String>) -> Self {
        self.plan = Some((prefix, len));
        self.mediator = Some(mediator.into());
        self
    }

    pub fn in_plan(&self, addr: Ipv4Addr) -> bool {
        self.plan.is_some_and(|(prefix, len)| {
            let mask = if len == 0 {
                0
            } else {
                u32::MAX << (32 - u32::from(len))
            };
            u32::from(addr) & mask == u32::from(prefix) & mask
        })
    }

    pub fn lookup(&self, addr: Ipv4Addr) -> Option<&str> {
        self.entries
            .get(&addr)
            .map(String::as_str)
            .or_else(|| self.mediator.as_deref().filter(|_| self.in_plan(addr)))
    }
}

pub fn route_inner(packet: &InnerPacket, table: &RoutingTable) -> Result<String, TunnelError> {
    table
        .lookup(packet.dst)
        .map(str::to_string)
        .ok_or(TunnelError::NoRoute(packet.dst))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handshake::derive_session_keys;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn pair() -> (TunnelSession, TunnelSession) {
        let keys = derive_session_keys(b"shared", &[1; 32], &[2; 32]);
        (
            establish_tunnel(&keys, Role::Initiator, Route::new("gw-1", "vpn-server")),
            establish_tunnel(&keys, Role::Responder, Route::new("vpn-server", "gw-1")),
        )
    }

    fn packet(payload: &[u8]) -> InnerPacket {
        InnerPacket::new(Ipv4Addr::new(10, 1, 0, 2), Ipv4Addr::new(10, 200, 0, 1), payload)
    }

    #[test]
    fn keys_are_mirrored() {
        let (a, b) = pair();
        assert_eq!(a.write_key, b.peer_key);
        assert_eq!(a.write_mac_key, b.peer_mac_key);
        assert_eq!(b.write_key, a.peer_key);
        assert_ne!(a.write_key, b.write_key);
        assert_eq!(a.send_seq(), 0);
        assert_eq!(a.replay_window().highest(), None);
    }

    #[test]
    fn both_directions_roundtrip() {
        let (mut a, mut b) = pair();
        let p = packet(b"temperature=21.5");
        assert_eq!(b.decapsulate(&a.encapsulate(&p).unwrap()).unwrap(), p);
        assert_eq!(a.decapsulate(&b.encapsulate(&p).unwrap()).unwrap(), p);
    }

    #[test]
    fn sequence_numbers_and_ciphertexts_advance() {
        let (mut a, _) = pair();
        let p = packet(b"same payload every time");
        let f0 = a.encapsulate(&p).unwrap();
        let f1 = a.encapsulate(&p).unwrap();
        assert_eq!((f0.seq, f1.seq), (0, 1));
        assert_ne!(f0.ciphertext, f1.ciphertext);
    }

    #[test]
    fn duplicate_is_replay() {
        let (mut a, mut b) = pair();
        let f = a.encapsulate(&packet(b"toggle")).unwrap();
        b.decapsulate(&f).unwrap();
        assert_eq!(b.decapsulate(&f), Err(TunnelError::Replay(0)));
    }

    #[test]
    fn tag_checked_before_replay() {
        let (mut a, mut b) = pair();
        let mut f = a.encapsulate(&packet(b"toggle")).unwrap();
        b.decapsulate(&f).unwrap();
        f.tag[0] ^= 1;
        assert_eq!(b.decapsulate(&f), Err(TunnelError::BadTag));
    }

    #[test]
    fn payload_bound() {
        let (mut a, mut b) = pair();
        let max = packet(&[7; MAX_PAYLOAD]);
        let f = a.encapsulate(&max).unwrap();
        assert_eq!(f.encode().len(), MAX_FRAME_LEN);
        assert_eq!(b.decapsulate_bytes(&f.encode()).unwrap(), max);
        assert_eq!(
            a.encapsulate(&packet(&[7; MAX_PAYLOAD + 1])),
            Err(TunnelError::PayloadTooLarge(MAX_PAYLOAD + 1))
        );
        assert_eq!(a.send_seq(), 1);
    }

    #[test]
    fn sequence_exhaustion() {
        let (mut a, _) = pair();
        a.send_seq = u64::MAX - 1;
        assert_eq!(a.encapsulate(&packet(b"x")).unwrap().seq, u64::MAX - 1);
        assert_eq!(a.encapsulate(&packet(b"x")), Err(TunnelError::SequenceExhausted));
        assert_eq!(a.send_seq(), u64::MAX);
    }

    #[test]
    fn structural_errors() {
        let (mut a, _) = pair();
        let bytes = a.encapsulate(&packet(b"abc")).unwrap().encode();
        let mut m = bytes.clone();
        m[0] = 0x57;
        assert_eq!(TunnelFrame::decode(&m), Err(TunnelError::BadMagic));
        let mut m = bytes.clone();
        m[2] = 2;
        assert_eq!(TunnelFrame::decode(&m), Err(TunnelError::BadVersion(2)));
        assert!(matches!(
            TunnelFrame::decode(&bytes[..bytes.len() - 1]),
            Err(TunnelError::BadLength(_))
        ));
        assert!(matches!(
            TunnelFrame::decode(&bytes[..10]),
            Err(TunnelError::BadLength(_))
        ));
        assert_eq!(TunnelFrame::decode(&[]), Err(TunnelError::BadMagic));
        let mut m = bytes.clone();
        m[16] ^= 1;
        assert!(matches!(TunnelFrame::decode(&m), Err(TunnelError::BadLength(_))));
        assert_eq!(TunnelFrame::decode(&bytes).unwrap().encode(), bytes);
    }

    #[test]
    fn wrong_session() {
        let (mut a, _) = pair();
        let other = derive_session_keys(b"other", &[1; 32], &[2; 32]);
        let mut c = establish_tunnel(&other, Role::Responder, Route::new("x", "y"));
        let f = a.encapsulate(&packet(b"abc")).unwrap();
        assert_eq!(c.decapsulate(&f), Err(TunnelError::WrongSession));
    }

    #[test]
    fn forged_under_random_keys_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (_, mut b) = pair();
        for _ in 0..200 {
            let mut forged = SessionKeys::from_bytes(&{
                let mut k = [0u8; crate::handshake::SESSION_KEYS_LEN];
                rng.fill(&mut k[..]);
                k
            });
            forged.session_id = b.session_id();
            let mut f = establish_tunnel(&forged, Role::Initiator, Route::new("adv", "x"));
            let frame = f.encapsulate(&packet(b"forged")).unwrap();
            assert_eq!(b.decapsulate(&frame), Err(TunnelError::BadTag));
        }
    }

    #[test]
    fn in_window_reordering_accepted_once() {
        let (mut a, mut b) = pair();
        let frames: Vec<_> = (0..64).map(|_| a.encapsulate(&packet(b"r")).unwrap()).collect();
        b.decapsulate(&frames[63]).unwrap();
        for f in frames[..63].iter().rev() {
            b.decapsulate(f).unwrap();
        }
        for f in &frames {
            assert_eq!(b.decapsulate(f), Err(TunnelError::Replay(f.seq)));
        }
        let late = a.encapsulate(&packet(b"r")).unwrap();
        b.decapsulate(&late).unwrap();
        // now 64 is highest; 0 is 64 behind and outside the window
        assert_eq!(b.decapsulate(&frames[0]), Err(TunnelError::Replay(0)));
    }

    #[test]
    fn shuffled_trace_with_duplicates() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (mut a, mut b) = pair();
            let frames: Vec<_> = (0..100)
                .map(|_| a.encapsulate(&packet(b"trace")).unwrap())
                .collect();
            let mut trace: Vec<usize> = (0..100).collect();
            for _ in 0..30 {
                trace.push(rng.gen_range(0..100));
            }
            trace.shuffle(&mut rng);
            let mut accepted = [0u32; 100];
            for &i in &trace {
                match b.decapsulate(&frames[i]) {
                    Ok(_) => accepted[i] += 1,
                    Err(TunnelError::Replay(_)) => {}
                    Err(e) => panic!("unexpected {e}"),
                }
            }
            assert!(accepted.iter().all(|&n| n <= 1));
        }
    }

    #[test]
    fn routing() {
        let mut table = RoutingTable::new().with_mediator(Ipv4Addr::new(10, 0, 0, 0), 8, "vpn-server");
        table.insert(Ipv4Addr::new(10, 1, 0, 2), "gw-1");
        let to = |d: Ipv4Addr| InnerPacket::new(Ipv4Addr::new(10, 200, 0, 1), d, vec![]);
        assert_eq!(
            route_inner(&to(Ipv4Addr::new(10, 1, 0, 2)), &table).unwrap(),
            "gw-1"
        );
        assert_eq!(
            route_inner(&to(Ipv4Addr::new(10, 2, 0, 2)), &table).unwrap(),
            "vpn-server"
        );
        assert_eq!(
            route_inner(&to(Ipv4Addr::new(192, 168, 1, 1)), &table),
            Err(TunnelError::NoRoute(Ipv4Addr::new(192, 168, 1, 1)))
        );
        let mut direct = RoutingTable::new();
        direct.insert(Ipv4Addr::new(10, 1, 0, 2), "gw-1");
        assert!(route_inner(&to(Ipv4Addr::new(10, 2, 0, 2)), &direct).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_identity(src: [u8; 4], dst: [u8; 4], payload in proptest::collection::vec(any::<u8>(), 0..=MAX_PAYLOAD)) {
            let (mut a, mut b) = pair();
            let p = InnerPacket::new(src.into(), dst.into(), payload);
            let bytes = a.encapsulate(&p).unwrap().encode();
            prop_assert_eq!(b.decapsulate_bytes(&bytes).unwrap(), p);
        }

        #[test]
        fn any_protected_bit_flip_is_bad_tag(payload in proptest::collection::vec(any::<u8>(), 0..64), pick: usize) {
            let (mut a, mut b) = pair();
            let bytes = a.encapsulate(&packet(&payload)).unwrap().encode();
            // seq, ciphertext and tag; session id and structural fields have their own errors
            let protected: Vec<usize> = (7..15).chain(FRAME_HEADER_LEN..bytes.len()).collect();
            let bit = pick % (protected.len() * 8);
            let mut m = bytes.clone();
            m[protected[bit / 8]] ^= 1 << (bit % 8);
            prop_assert_eq!(b.decapsulate_bytes(&m), Err(TunnelError::BadTag));
        }

        #[test]
        fn every_bit_flip_rejected(pick: usize) {
            let (mut a, mut b) = pair();
            let bytes = a.encapsulate(&packet(b"sensor reading")).unwrap().encode();
            let bit = pick % (bytes.len() * 8);
            let mut m = bytes.clone();
            m[bit / 8] ^= 1 << (bit % 8);
            prop_assert!(b.decapsulate_bytes(&m).is_err());
        }
    }
}
