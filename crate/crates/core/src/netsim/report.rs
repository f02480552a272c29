use crate::ecc::{key_material_size, Curve, KeyScheme, SecurityLevel};
use crate::handshake::{decode_flight, HandshakeMessage};
use crate::registry::{AuthDecision, Certificate};
use serde::Serialize;
use std::collections::HashMap;

/// Shortest payload substring that counts as recovered plaintext.
pub const PLAINTEXT_WINDOW: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub schema: u32,
    pub scenario: String,
    pub seed: u64,
    pub curve: String,
    pub epochs_run: u64,
    pub quiescent: bool,
    pub nodes: NodeCounts,
    pub logins: Vec<LoginRecord>,
    pub handshakes: Vec<HandshakeRecord>,
    pub frames: FrameCounts,
    pub packets: PacketCounts,
    pub devices: Vec<DeviceReport>,
    pub adversary: Option<AdversaryReport>,
    /// Byte profile of the first completed handshake.
    pub handshake_bytes: Option<HandshakeByteProfile>,
    pub cia: CiaVerdict,
    pub counts_consistent: bool,
    pub security_violation: bool,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn handshake(&self, initiator: &str, responder: &str) -> Option<&HandshakeRecord> {
        self.handshakes
            .iter()
            .find(|h| h.initiator == initiator && h.responder == responder)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct NodeCounts {
    pub vpn_server: usize,
    pub gateways: usize,
    pub iot_devices: usize,
    pub users: usize,
    pub adversary: usize,
}

impl NodeCounts {
    pub fn total(&self) -> usize {
        self.vpn_server + self.gateways + self.iot_devices + self.users + self.adversary
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoginRecord {
    pub epoch: u64,
    pub username: String,
    pub decision: AuthDecision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HandshakeOutcome {
    Established,
    Failed,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HandshakeRecord {
    pub initiator: String,
    pub responder: String,
    pub outcome: HandshakeOutcome,
    pub error: Option<String>,
    pub responder_error: Option<String>,
    pub started_at: u64,
    pub established_at: Option<u64>,
    pub retransmits: u32,
    /// Whether both ends derived byte-identical session keys.
    pub keys_match: Option<bool>,
    /// First transmission of flights 1 to 6; 0 when never sent.
    pub flight_bytes: [usize; 6],
    pub total_bytes: usize,
}

/// Every tunnel frame put on a link ends in exactly one bucket:
/// `sent = delivered + blocked + replay_rejected + dropped`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FrameCounts {
    pub sent: u64,
    pub delivered: u64,
    pub blocked: u64,
    pub replay_rejected: u64,
    /// Lost on the link or still in flight when the run ended.
    pub dropped: u64,
    pub link_duplicates: u64,
}

impl FrameCounts {
    pub fn consistent(&self) -> bool {
        self.sent == self.delivered + self.blocked + self.replay_rejected + self.dropped
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PacketCounts {
    /// Application packets created, including device replies.
    pub originated: u64,
    pub delivered: u64,
    /// Packets with no route, or still waiting for a tunnel at the end.
    pub undeliverable: u64,
    /// Delivered packets that match nothing that was sent.
    pub corrupted: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeviceReport {
    pub id: String,
    pub gateway: String,
    pub behavior: super::Behavior,
    pub requests_handled: u64,
    pub state: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AdversaryReport {
    pub captured_datagrams: u64,
    pub captured_bytes: u64,
    pub payloads_checked: u64,
    pub plaintext_recovered: u64,
    pub replays_sent: u64,
    pub replays_rejected: u64,
    pub injections_sent: u64,
    pub mutations_sent: u64,
    pub mutations_rejected_bad_tag: u64,
    pub forgeries_sent: u64,
    pub forgeries_rejected_bad_tag: u64,
    /// Adversary-sent frames that a node decapsulated successfully.
    pub frames_accepted: u64,
    pub handshakes_established: u64,
    pub impersonations: Vec<LoginRecord>,
    pub self_signed_attempts: Vec<SelfSignedAttempt>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SelfSignedAttempt {
    pub epoch: u64,
    pub target: String,
    pub claimed_id: String,
    pub outcome: HandshakeOutcome,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CiaVerdict {
    pub confidentiality: bool,
    pub integrity: bool,
    pub authenticity: bool,
}

impl CiaVerdict {
    pub fn all(&self) -> bool {
        self.confidentiality && self.integrity && self.authenticity
    }
}

/// Wire sizes of one handshake, with the same exchange re-costed at every
/// security level using ECC and RSA key sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HandshakeByteProfile {
    pub curve: String,
    pub flights: [usize; 6],
    pub total: usize,
    pub ephemeral_public_key_len: usize,
    pub signature_len: usize,
    /// Public keys carried: two certificate keys and two ephemeral keys.
    pub key_fields: usize,
    /// Signatures carried: two certificates, two key exchanges, one
    /// certificate verify.
    pub signature_fields: usize,
    /// Bytes that are neither keys nor signatures.
    pub fixed_overhead: usize,
    pub by_level: Vec<LevelCost>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LevelCost {
    pub security_bits: u32,
    pub ecc_key_bits: u32,
    pub rsa_key_bits: u32,
    pub ecc_key_field: usize,
    pub rsa_key_field: usize,
    pub ecc_signature_field: usize,
    pub rsa_signature_field: usize,
    pub ecc_total: usize,
    pub rsa_total: usize,
}

fn bytes_for(bits: u32) -> usize {
    (bits as usize).div_ceil(8)
}

/// `flights[i]` is the first transmission of flight `i + 1`.
///
/// ECC keys are costed as uncompressed points and signatures as point plus
/// scalar, matching this implementation's encodings. RSA keys are costed as
/// the modulus and signatures as one modulus-sized integer.
pub fn handshake_byte_profile(curve: &Curve, flights: &[Vec<u8>; 6]) -> Result<HandshakeByteProfile, String> {
    let parse = |i: usize| decode_flight(&flights[i]).map_err(|e| format!("flight {}: {e}", i + 1));
    let mut key_bytes = 0;
    let mut sig_bytes = 0;
    let mut key_fields = 0;
    let mut signature_fields = 0;
    let mut ephemeral_public_key_len = 0;
    let mut signature_len = 0;
    for msg in parse(3)?.into_iter().chain(parse(4)?) {
        match msg {
            HandshakeMessage::Certificate { certificate } => {
                let cert = Certificate::decode(curve, &certificate).map_err(|e| e.to_string())?;
                key_bytes += curve.encode_point(&cert.subject_public_key).len();
                sig_bytes += cert.signature.encode(curve).len();
                key_fields += 1;
                signature_fields += 1;
            }
            HandshakeMessage::KeyExchange {
                ephemeral_public,
                signature,
            } => {
                ephemeral_public_key_len = ephemeral_public.len();
                signature_len = signature.len();
                key_bytes += ephemeral_public.len();
                sig_bytes += signature.len();
                key_fields += 1;
                signature_fields += 1;
            }
            HandshakeMessage::CertificateVerify { signature } => {
                sig_bytes += signature.len();
                signature_fields += 1;
            }
            _ => {}
        }
    }
    let sizes: [usize; 6] = std::array::from_fn(|i| flights[i].len());
    let total: usize = sizes.iter().sum();
    let fixed_overhead = total - key_bytes - sig_bytes;
    let by_level = SecurityLevel::all()
        .map(|level| {
            let ecc_key_bits = key_material_size(KeyScheme::Ecc, level);
            let rsa_key_bits = key_material_size(KeyScheme::Rsa, level);
            let coord = bytes_for(ecc_key_bits);
            let ecc_key_field = 1 + 2 * coord;
            let ecc_signature_field = ecc_key_field + coord;
            let rsa_key_field = bytes_for(rsa_key_bits);
            let rsa_signature_field = rsa_key_field;
            LevelCost {
                security_bits: level.bits(),
                ecc_key_bits,
                rsa_key_bits,
                ecc_key_field,
                rsa_key_field,
                ecc_signature_field,
                rsa_signature_field,
                ecc_total: fixed_overhead
                    + key_fields * ecc_key_field
                    + signature_fields * ecc_signature_field,
                rsa_total: fixed_overhead
                    + key_fields * rsa_key_field
                    + signature_fields * rsa_signature_field,
            }
        })
        .collect();
    Ok(HandshakeByteProfile {
        curve: curve.name().to_string(),
        flights: sizes,
        total,
        ephemeral_public_key_len,
        signature_len,
        key_fields,
        signature_fields,
        fixed_overhead,
        by_level,
    })
}

/// Number of payloads with at least one `PLAINTEXT_WINDOW`-byte substring
/// appearing verbatim in some captured datagram. Payloads shorter than the
/// window are not checked.
pub fn count_recovered_payloads(payloads: &[Vec<u8>], capture: &[Vec<u8>]) -> u64 {
    let mut windows: HashMap<&[u8], Vec<usize>> = HashMap::new();
    for (i, p) in payloads.iter().enumerate() {
        for w in p.windows(PLAINTEXT_WINDOW) {
            windows.entry(w).or_default().push(i);
        }
    }
    let mut recovered = vec![false; payloads.len()];
    for datagram in capture {
        for w in datagram.windows(PLAINTEXT_WINDOW) {
            if let Some(owners) = windows.get(w) {
                for &i in owners {
                    recovered[i] = true;
                }
            }
        }
    }
    recovered.iter().filter(|&&r| r).count() as u64
}
