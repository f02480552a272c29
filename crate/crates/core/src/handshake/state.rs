use super::keys::{derive_session_keys, SessionKeys};
use super::message::{decode_flight, encode_flight, HandshakeMessage};
use super::{compute_cookie, HandshakeError, DEFAULT_MAX_RETRANSMITS, NONCE_LEN};
use crate::ecc::{self, Curve, KeyPair, Point, Signature};
use crate::hash::{ct_eq, hmac_sha256, Transcript};
use crate::registry::{CertStatus, Certificate, SubjectKind, TrustStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

const KX_LABEL_INITIATOR: &[u8] = b"iotsec/kx/initiator";
const KX_LABEL_RESPONDER: &[u8] = b"iotsec/kx/responder";
const CV_LABEL: &[u8] = b"iotsec/certificate-verify";

/// A static key pair together with the certificate the registry issued for it.
#[derive(Debug, Clone)]
pub struct Identity {
    pub keypair: KeyPair,
    pub certificate: Certificate,
}

#[derive(Debug, Clone)]
pub struct HandshakeConfig {
    pub curve: Curve,
    pub identity: Identity,
    /// When set, the peer certificate must name exactly this subject.
    pub expected_peer: Option<String>,
    /// Epochs to wait for the peer's next flight before retransmitting.
    pub retransmit_timeout: u64,
    pub max_retransmits: u32,
}

impl HandshakeConfig {
    pub fn new(curve: Curve, identity: Identity) -> Self {
        HandshakeConfig {
            curve,
            identity,
            expected_peer: None,
            retransmit_timeout: 4,
            max_retransmits: DEFAULT_MAX_RETRANSMITS,
        }
    }

    pub fn expect_peer(mut self, subject_id: impl Into<String>) -> Self {
        self.expected_peer = Some(subject_id.into());
        self
    }

    pub fn with_timeout(mut self, epochs: u64) -> Self {
        self.retransmit_timeout = epochs;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Initiator,
    Responder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    /// Initiator sent F1.
    AwaitingCookie,
    /// Initiator sent F3.
    HelloSent,
    /// Responder sent F4.
    ParamsSent,
    /// Initiator sent F5.
    KeysSent,
    /// Responder verified the initiator's CertificateVerify.
    FinishedWait,
    Established,
    Failed,
}

/// Result of feeding one message: what to send back, and the session keys if
/// this message completed the handshake.
#[derive(Debug, Default)]
pub struct Step {
    pub outbound: Vec<HandshakeMessage>,
    pub session_keys: Option<SessionKeys>,
}

impl Step {
    fn send(outbound: Vec<HandshakeMessage>) -> Self {
        Step {
            outbound,
            session_keys: None,
        }
    }
}

/// Output of [`HandshakeState::process_datagram`].
#[derive(Debug, Default)]
pub struct DatagramStep {
    pub outbound: Option<Vec<u8>>,
    pub session_keys: Option<SessionKeys>,
    pub error: Option<HandshakeError>,
}

pub struct HandshakeState {
    role: Role,
    phase: Phase,
    config: HandshakeConfig,
    rng: ChaCha20Rng,
    ephemeral: Option<KeyPair>,
    client_nonce: Option<[u8; NONCE_LEN]>,
    server_nonce: Option<[u8; NONCE_LEN]>,
    cookie: Option<[u8; 16]>,
    cookie_secret: [u8; 32],
    peer_address: Vec<u8>,
    peer_certificate: Option<Certificate>,
    peer_ephemeral: Option<Point>,
    pending_keys: Option<SessionKeys>,
    session_keys: Option<SessionKeys>,
    transcript: Transcript,
    last_flight: Vec<HandshakeMessage>,
    // encoded messages of the peer flight that produced `last_flight`
    prev_peer_flight: Vec<Vec<u8>>,
    current_peer_flight: Vec<Vec<u8>>,
    retransmits: u32,
    last_sent_at: u64,
    failure: Option<HandshakeError>,
}

impl std::fmt::Debug for HandshakeState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HandshakeState")
            .field("role", &self.role)
            .field("phase", &self.phase)
            .field("retransmits", &self.retransmits)
            .field("failure", &self.failure)
            .finish_non_exhaustive()
    }
}

impl HandshakeState {
    fn new(role: Role, config: HandshakeConfig, seed: [u8; 32]) -> Self {
        HandshakeState {
            role,
            phase: Phase::Idle,
            config,
            rng: ChaCha20Rng::from_seed(seed),
            ephemeral: None,
            client_nonce: None,
            server_nonce: None,
            cookie: None,
            cookie_secret: [0; 32],
            peer_address: Vec::new(),
            peer_certificate: None,
            peer_ephemeral: None,
            pending_keys: None,
            session_keys: None,
            transcript: Transcript::new(),
            last_flight: Vec::new(),
            prev_peer_flight: Vec::new(),
            current_peer_flight: Vec::new(),
            retransmits: 0,
            last_sent_at: 0,
            failure: None,
        }
    }

    /// `seed` feeds the nonce and ephemeral key; equal seeds give equal runs.
    pub fn initiator(config: HandshakeConfig, seed: [u8; 32]) -> Self {
        Self::new(Role::Initiator, config, seed)
    }

    /// A responder bound to one initiator transport address. It holds no
    /// per-peer state until a valid cookie comes back.
    pub fn responder(
        config: HandshakeConfig,
        cookie_secret: [u8; 32],
        peer_address: &[u8],
        seed: [u8; 32],
    ) -> Self {
        let mut s = Self::new(Role::Responder, config, seed);
        s.cookie_secret = cookie_secret;
        s.peer_address = peer_address.to_vec();
        s
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.phase, Phase::Established | Phase::Failed)
    }

    /// Present iff the phase is `Established`.
    pub fn session_keys(&self) -> Option<&SessionKeys> {
        self.session_keys.as_ref()
    }

    pub fn peer_certificate(&self) -> Option<&Certificate> {
        self.peer_certificate.as_ref()
    }

    pub fn failure(&self) -> Option<&HandshakeError> {
        self.failure.as_ref()
    }

    pub fn client_nonce(&self) -> Option<&[u8; NONCE_LEN]> {
        self.client_nonce.as_ref()
    }

    pub fn retransmits(&self) -> u32 {
        self.retransmits
    }

    pub fn transcript_hash(&self) -> [u8; 32] {
        self.transcript.current()
    }

    /// Epoch at which `on_timeout` will next act, if a flight is outstanding.
    pub fn next_timeout(&self) -> Option<u64> {
        match self.phase {
            Phase::Idle | Phase::Established | Phase::Failed => None,
            _ => Some(self.last_sent_at + self.config.retransmit_timeout),
        }
    }

    /// Emits F1.
    pub fn start(&mut self, now: u64) -> Result<Vec<HandshakeMessage>, HandshakeError> {
        if self.role != Role::Initiator || self.phase != Phase::Idle {
            return Err(HandshakeError::WrongPhase("start", self.phase));
        }
        let client_nonce: [u8; NONCE_LEN] = self.rng.gen();
        self.client_nonce = Some(client_nonce);
        self.phase = Phase::AwaitingCookie;
        Ok(self.send_flight(
            vec![HandshakeMessage::ClientHello {
                client_nonce,
                cookie: None,
            }],
            now,
        ))
    }

    fn send_flight(&mut self, flight: Vec<HandshakeMessage>, now: u64) -> Vec<HandshakeMessage> {
        self.last_flight = flight.clone();
        self.retransmits = 0;
        self.last_sent_at = now;
        flight
    }

    fn complete_peer_flight(&mut self, last: Vec<u8>) {
        self.current_peer_flight.push(last);
        self.prev_peer_flight = std::mem::take(&mut self.current_peer_flight);
    }

    fn fail(&mut self, err: HandshakeError) {
        self.phase = Phase::Failed;
        self.failure = Some(err);
        self.pending_keys = None;
        self.session_keys = None;
        self.last_flight.clear();
    }

    /// Feeds one peer message.
    ///
    /// Byte-identical repeats of the peer's previous flight are treated as
    /// retransmissions: the last message of that flight triggers a resend of
    /// our own last flight, the others are ignored. Once established, all
    /// other input is ignored. Any other unexpected or invalid message fails
    /// the handshake; the caller should send `err.abort_message()`.
    pub fn process_message(
        &mut self,
        msg: &HandshakeMessage,
        trust: &dyn TrustStore,
        now: u64,
    ) -> Result<Step, HandshakeError> {
        if self.phase == Phase::Failed {
            return Err(HandshakeError::Closed);
        }
        if let HandshakeMessage::Abort { reason } = msg {
            if self.phase == Phase::Established {
                return Ok(Step::default());
            }
            let err = HandshakeError::PeerAborted(*reason);
            self.fail(err.clone());
            return Err(err);
        }
        if let (
            Role::Responder,
            HandshakeMessage::ClientHello {
                client_nonce,
                cookie: None,
            },
        ) = (self.role, msg)
        {
            let cookie = compute_cookie(&self.cookie_secret, &self.peer_address, client_nonce);
            return Ok(Step::send(vec![HandshakeMessage::HelloVerifyRequest { cookie }]));
        }

        let encoded = msg.encode();
        if self.prev_peer_flight.contains(&encoded) {
            let resend = self.prev_peer_flight.last() == Some(&encoded);
            return Ok(if resend {
                Step::send(self.last_flight.clone())
            } else {
                Step::default()
            });
        }
        if self.current_peer_flight.contains(&encoded) || self.phase == Phase::Established {
            return Ok(Step::default());
        }

        match self.dispatch(msg, encoded, trust, now) {
            Ok(step) => Ok(step),
            Err(err) => {
                self.fail(err.clone());
                Err(err)
            }
        }
    }

    fn dispatch(
        &mut self,
        msg: &HandshakeMessage,
        encoded: Vec<u8>,
        trust: &dyn TrustStore,
        now: u64,
    ) -> Result<Step, HandshakeError> {
        use HandshakeMessage as M;
        match (self.role, self.phase, msg) {
            (Role::Initiator, Phase::AwaitingCookie, M::HelloVerifyRequest { cookie }) => {
                let client_nonce = self.client_nonce.expect("set by start");
                self.cookie = Some(*cookie);
                let hello = M::ClientHello {
                    client_nonce,
                    cookie: Some(*cookie),
                };
                self.transcript.update(&hello.encode());
                self.complete_peer_flight(encoded);
                self.phase = Phase::HelloSent;
                Ok(Step::send(self.send_flight(vec![hello], now)))
            }

            (
                Role::Responder,
                Phase::Idle,
                M::ClientHello {
                    client_nonce,
                    cookie: Some(cookie),
                },
            ) => {
                let expected = compute_cookie(&self.cookie_secret, &self.peer_address, client_nonce);
                if !ct_eq(&expected, cookie) {
                    return Err(HandshakeError::BadCookie);
                }
                self.client_nonce = Some(*client_nonce);
                self.cookie = Some(*cookie);
                self.transcript.update(&encoded);
                self.complete_peer_flight(encoded);

                let server_nonce: [u8; NONCE_LEN] = self.rng.gen();
                self.server_nonce = Some(server_nonce);
                let flight = vec![
                    M::ServerHello { server_nonce },
                    self.certificate_message(),
                    self.key_exchange_message()?,
                ];
                for m in &flight {
                    self.transcript.update(&m.encode());
                }
                self.phase = Phase::ParamsSent;
                Ok(Step::send(self.send_flight(flight, now)))
            }

            (Role::Initiator, Phase::HelloSent, M::ServerHello { server_nonce })
                if self.server_nonce.is_none() =>
            {
                self.server_nonce = Some(*server_nonce);
                self.transcript.update(&encoded);
                self.current_peer_flight.push(encoded);
                Ok(Step::default())
            }

            (Role::Initiator, Phase::HelloSent, M::Certificate { certificate })
                if self.server_nonce.is_some() && self.peer_certificate.is_none() =>
            {
                let cert = self.check_certificate(certificate, trust)?;
                self.peer_certificate = Some(cert);
                self.transcript.update(&encoded);
                self.current_peer_flight.push(encoded);
                Ok(Step::default())
            }

            (
                Role::Initiator,
                Phase::HelloSent,
                M::KeyExchange {
                    ephemeral_public,
                    signature,
                },
            ) if self.peer_certificate.is_some() => {
                self.accept_key_exchange(ephemeral_public, signature)?;
                self.transcript.update(&encoded);
                self.complete_peer_flight(encoded);

                let mut flight = vec![self.certificate_message(), self.key_exchange_message()?];
                for m in &flight {
                    self.transcript.update(&m.encode());
                }
                self.derive_pending_keys()?;
                let cv_body = [CV_LABEL, &self.transcript.current()[..]].concat();
                let cv = M::CertificateVerify {
                    signature: ecc::sign(&self.config.curve, &self.config.identity.keypair, &cv_body)
                        .expect("non-empty message")
                        .encode(&self.config.curve),
                };
                self.transcript.update(&cv.encode());
                let keys = self.pending_keys.as_ref().expect("derived above");
                let fin = M::Finished {
                    verify_mac: hmac_sha256(&keys.initiator_mac_key, &[&self.transcript.current()]),
                };
                self.transcript.update(&fin.encode());
                flight.push(cv);
                flight.push(fin);
                self.phase = Phase::KeysSent;
                Ok(Step::send(self.send_flight(flight, now)))
            }

            (Role::Responder, Phase::ParamsSent, M::Certificate { certificate })
                if self.peer_certificate.is_none() =>
            {
                let cert = self.check_certificate(certificate, trust)?;
                self.peer_certificate = Some(cert);
                self.transcript.update(&encoded);
                self.current_peer_flight.push(encoded);
                Ok(Step::default())
            }

            (
                Role::Responder,
                Phase::ParamsSent,
                M::KeyExchange {
                    ephemeral_public,
                    signature,
                },
            ) if self.peer_certificate.is_some() && self.peer_ephemeral.is_none() => {
                self.accept_key_exchange(ephemeral_public, signature)?;
                self.derive_pending_keys()?;
                self.transcript.update(&encoded);
                self.current_peer_flight.push(encoded);
                Ok(Step::default())
            }

            (Role::Responder, Phase::ParamsSent, M::CertificateVerify { signature })
                if self.peer_ephemeral.is_some() =>
            {
                let peer = self.peer_certificate.as_ref().expect("checked in guard");
                let sig = Signature::decode(&self.config.curve, signature)
                    .map_err(|e| HandshakeError::MalformedMessage(e.to_string()))?;
                let body = [CV_LABEL, &self.transcript.current()[..]].concat();
                let ok =
                    ecc::verify(&self.config.curve, &peer.subject_public_key, &body, &sig).unwrap_or(false);
                if !ok {
                    return Err(HandshakeError::BadSignature);
                }
                self.transcript.update(&encoded);
                self.current_peer_flight.push(encoded);
                self.phase = Phase::FinishedWait;
                Ok(Step::default())
            }

            (Role::Responder, Phase::FinishedWait, M::Finished { verify_mac }) => {
                let keys = self.pending_keys.clone().expect("derived at KeyExchange");
                let expected = hmac_sha256(&keys.initiator_mac_key, &[&self.transcript.current()]);
                if !ct_eq(&expected, verify_mac) {
                    return Err(HandshakeError::BadFinished);
                }
                self.transcript.update(&encoded);
                self.complete_peer_flight(encoded);
                let fin = M::Finished {
                    verify_mac: hmac_sha256(&keys.responder_mac_key, &[&self.transcript.current()]),
                };
                self.transcript.update(&fin.encode());
                self.phase = Phase::Established;
                self.session_keys = self.pending_keys.take();
                Ok(Step {
                    outbound: self.send_flight(vec![fin], now),
                    session_keys: Some(keys),
                })
            }

            (Role::Initiator, Phase::KeysSent, M::Finished { verify_mac }) => {
                let keys = self.pending_keys.clone().expect("derived before F5");
                let expected = hmac_sha256(&keys.responder_mac_key, &[&self.transcript.current()]);
                if !ct_eq(&expected, verify_mac) {
                    return Err(HandshakeError::BadFinished);
                }
                self.transcript.update(&encoded);
                self.complete_peer_flight(encoded);
                self.phase = Phase::Established;
                self.session_keys = self.pending_keys.take();
                // nothing left to retransmit
                self.last_flight.clear();
                Ok(Step {
                    outbound: Vec::new(),
                    session_keys: Some(keys),
                })
            }

            (_, phase, msg) => Err(HandshakeError::WrongPhase(msg.name(), phase)),
        }
    }

    fn certificate_message(&self) -> HandshakeMessage {
        HandshakeMessage::Certificate {
            certificate: self.config.identity.certificate.encode(&self.config.curve),
        }
    }

    fn key_exchange_body(&self, label: &[u8], ephemeral_public: &[u8]) -> Vec<u8> {
        [
            label,
            &self.client_nonce.expect("nonces known before key exchange")[..],
            &self.server_nonce.expect("nonces known before key exchange")[..],
            ephemeral_public,
        ]
        .concat()
    }

    fn key_exchange_message(&mut self) -> Result<HandshakeMessage, HandshakeError> {
        let curve = self.config.curve.clone();
        let ephemeral = ecc::keygen(&curve, &mut self.rng);
        let ephemeral_public = curve.encode_point(ephemeral.public());
        let label = match self.role {
            Role::Initiator => KX_LABEL_INITIATOR,
            Role::Responder => KX_LABEL_RESPONDER,
        };
        let body = self.key_exchange_body(label, &ephemeral_public);
        let signature = ecc::sign(&curve, &self.config.identity.keypair, &body)
            .expect("non-empty message")
            .encode(&curve);
        self.ephemeral = Some(ephemeral);
        Ok(HandshakeMessage::KeyExchange {
            ephemeral_public,
            signature,
        })
    }

    fn accept_key_exchange(
        &mut self,
        ephemeral_public: &[u8],
        signature: &[u8],
    ) -> Result<(), HandshakeError> {
        let curve = &self.config.curve;
        let malformed = |e: ecc::EccError| HandshakeError::MalformedMessage(e.to_string());
        let point = curve.decode_point(ephemeral_public).map_err(malformed)?;
        if point.is_identity() {
            return Err(HandshakeError::MalformedMessage("identity ephemeral key".into()));
        }
        let sig = Signature::decode(curve, signature).map_err(malformed)?;
        let label = match self.role {
            Role::Initiator => KX_LABEL_RESPONDER,
            Role::Responder => KX_LABEL_INITIATOR,
        };
        let body = self.key_exchange_body(label, ephemeral_public);
        let peer = self
            .peer_certificate
            .as_ref()
            .expect("certificate precedes key exchange");
        let ok = ecc::verify(curve, &peer.subject_public_key, &body, &sig).unwrap_or(false);
        if !ok {
            return Err(HandshakeError::BadSignature);
        }
        self.peer_ephemeral = Some(point);
        Ok(())
    }

    fn derive_pending_keys(&mut self) -> Result<(), HandshakeError> {
        let own = self.ephemeral.as_ref().expect("own ephemeral generated");
        let peer = self.peer_ephemeral.as_ref().expect("peer ephemeral accepted");
        let shared = ecc::ecdh(&self.config.curve, own, peer)
            .map_err(|e| HandshakeError::MalformedMessage(e.to_string()))?;
        self.pending_keys = Some(derive_session_keys(
            &shared,
            &self.client_nonce.expect("nonce"),
            &self.server_nonce.expect("nonce"),
        ));
        Ok(())
    }

    fn check_certificate(&self, bytes: &[u8], trust: &dyn TrustStore) -> Result<Certificate, HandshakeError> {
        let curve = &self.config.curve;
        let cert =
            Certificate::decode(curve, bytes).map_err(|e| HandshakeError::MalformedMessage(e.to_string()))?;
        if !cert.verify(curve, trust.root_public()) {
            return Err(HandshakeError::BadCertificate(format!(
                "{} is not signed by the registry root",
                cert.subject_id
            )));
        }
        match trust.certificate_status(&cert) {
            CertStatus::Active => {}
            CertStatus::Revoked => {
                return Err(HandshakeError::BadCertificate(format!(
                    "{} is revoked",
                    cert.subject_id
                )))
            }
            CertStatus::Unknown => {
                return Err(HandshakeError::BadCertificate(format!(
                    "{} is not registered",
                    cert.subject_id
                )))
            }
        }
        if self.role == Role::Initiator
            && !matches!(cert.subject_kind, SubjectKind::Server | SubjectKind::Gateway)
        {
            return Err(HandshakeError::BadCertificate(format!(
                "{} cannot terminate tunnels",
                cert.subject_id
            )));
        }
        if let Some(expected) = &self.config.expected_peer {
            if &cert.subject_id != expected {
                return Err(HandshakeError::BadCertificate(format!(
                    "expected {expected}, got {}",
                    cert.subject_id
                )));
            }
        }
        Ok(cert)
    }

    /// Called by the driver when `next_timeout` has passed: resends the last
    /// flight, or fails with `Timeout` once the retransmission budget is spent.
    pub fn on_timeout(&mut self, now: u64) -> Result<Vec<HandshakeMessage>, HandshakeError> {
        let Some(deadline) = self.next_timeout() else {
            return Ok(Vec::new());
        };
        if now < deadline {
            return Ok(Vec::new());
        }
        if self.retransmits >= self.config.max_retransmits {
            self.fail(HandshakeError::Timeout);
            return Err(HandshakeError::Timeout);
        }
        self.retransmits += 1;
        self.last_sent_at = now;
        Ok(self.last_flight.clone())
    }

    /// Feeds a whole datagram (a flight). On failure the outbound bytes carry
    /// the matching `Abort`.
    pub fn process_datagram(&mut self, bytes: &[u8], trust: &dyn TrustStore, now: u64) -> DatagramStep {
        let mut out = DatagramStep::default();
        let messages = match decode_flight(bytes) {
            Ok(m) => m,
            Err(e) => {
                match self.phase {
                    Phase::Failed => out.error = Some(HandshakeError::Closed),
                    Phase::Established => {}
                    _ => {
                        let err = HandshakeError::from(e);
                        self.fail(err.clone());
                        out.outbound = err.abort_message().map(|m| m.encode());
                        out.error = Some(err);
                    }
                }
                return out;
            }
        };
        let mut outbound = Vec::new();
        for msg in &messages {
            match self.process_message(msg, trust, now) {
                Ok(step) => {
                    outbound.extend(step.outbound);
                    if step.session_keys.is_some() {
                        out.session_keys = step.session_keys;
                    }
                }
                Err(err) => {
                    outbound.clear();
                    outbound.extend(err.abort_message());
                    out.error = Some(err);
                    break;
                }
            }
        }
        if !outbound.is_empty() {
            out.outbound = Some(encode_flight(&outbound));
        }
        out
    }
}
