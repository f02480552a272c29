//! Registration database held by the VPN server.
//!
//! Every user, gateway and IoT device is enrolled here before it may take part
//! in a handshake. Enrollment issues a certificate signed by the server's root
//! key. Users additionally log in with a password and the MAC address they
//! registered; the MAC comparison is a second, independent check after the
//! password. MAC addresses are self-reported and spoofable, so this check only
//! adds defense in depth and is not a cryptographic binding.

use crate::ecc::{self, Curve, EccError, KeyPair, Point, Signature};
use crate::hash::{ct_eq, sha256};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

pub const SNAPSHOT_HEADER: &str = "IOTSEC-REGISTRY v1";
const SNAPSHOT_MAGIC: &str = "IOTSEC-REGISTRY";
const MAX_ID_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("username {0:?} is already registered")]
    DuplicateUsername(String),
    #[error("identifier {0:?} is already registered")]
    DuplicateId(String),
    #[error("private address {0} is already assigned")]
    DuplicateAddress(Ipv4Addr),
    #[error("unknown gateway {0:?}")]
    UnknownGateway(String),
    #[error("unknown subject {0:?}")]
    UnknownSubject(String),
    #[error("invalid identifier {0:?}")]
    InvalidIdentifier(String),
    #[error("{0} is not a private IPv4 address")]
    NotPrivateAddress(Ipv4Addr),
    #[error("gateway records cannot have an owning gateway")]
    GatewayOfGateway,
    #[error(transparent)]
    Ecc(#[from] EccError),
    #[error("unsupported registry snapshot version {0:?}")]
    UnsupportedVersion(String),
    #[error("registry snapshot line {line}: {message}")]
    Snapshot { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MacAddress(pub [u8; 6]);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid MAC address {0:?}")]
pub struct MacParseError(String);

impl FromStr for MacAddress {
    type Err = MacParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || MacParseError(s.to_string());
        let mut octets = [0u8; 6];
        let mut parts = s.split(':');
        for octet in octets.iter_mut() {
            let part = parts.next().ok_or_else(err)?;
            if part.len() != 2 {
                return Err(err());
            }
            *octet = u8::from_str_radix(part, 16).map_err(|_| err())?;
        }
        if parts.next().is_some() {
            return Err(err());
        }
        Ok(MacAddress(octets))
    }
}

impl fmt::Display for MacAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            o[0], o[1], o[2], o[3], o[4], o[5]
        )
    }
}

impl Serialize for MacAddress {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddress {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectKind {
    User,
    Gateway,
    IotDevice,
    Server,
}

impl SubjectKind {
    fn code(self) -> u8 {
        match self {
            SubjectKind::User => 1,
            SubjectKind::Gateway => 2,
            SubjectKind::IotDevice => 3,
            SubjectKind::Server => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => SubjectKind::User,
            2 => SubjectKind::Gateway,
            3 => SubjectKind::IotDevice,
            4 => SubjectKind::Server,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Active,
    Revoked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CertStatus {
    Active,
    Revoked,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub subject_id: String,
    pub subject_kind: SubjectKind,
    pub subject_public_key: Point,
    pub issued_at: u64,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed certificate: {0}")]
pub struct CertificateDecodeError(String);

impl Certificate {
    /// The bytes covered by the issuer signature:
    /// `len16(id) ‖ id ‖ kind ‖ len16(key) ‖ key ‖ issued_at(8)`.
    pub fn signed_bytes(
        curve: &Curve,
        subject_id: &str,
        kind: SubjectKind,
        public_key: &Point,
        issued_at: u64,
    ) -> Vec<u8> {
        let key = curve.encode_point(public_key);
        let mut out = Vec::with_capacity(2 + subject_id.len() + 3 + key.len() + 8);
        out.extend((subject_id.len() as u16).to_be_bytes());
        out.extend(subject_id.as_bytes());
        out.push(kind.code());
        out.extend((key.len() as u16).to_be_bytes());
        out.extend(key);
        out.extend(issued_at.to_be_bytes());
        out
    }

    pub fn canonical_bytes(&self, curve: &Curve) -> Vec<u8> {
        Self::signed_bytes(
            curve,
            &self.subject_id,
            self.subject_kind,
            &self.subject_public_key,
            self.issued_at,
        )
    }

    /// Signs a certificate with an arbitrary issuer key. The registry uses its
    /// root key; anything else produces a certificate no peer will accept.
    pub fn issue(
        curve: &Curve,
        issuer: &KeyPair,
        subject_id: &str,
        kind: SubjectKind,
        public_key: &Point,
        issued_at: u64,
    ) -> Result<Self, EccError> {
        let body = Self::signed_bytes(curve, subject_id, kind, public_key, issued_at);
        let signature = ecc::sign(curve, issuer, &body)?;
        Ok(Certificate {
            subject_id: subject_id.to_string(),
            subject_kind: kind,
            subject_public_key: public_key.clone(),
            issued_at,
            signature,
        })
    }

    /// Wire form: canonical bytes followed by `len16(sig) ‖ sig`.
    pub fn encode(&self, curve: &Curve) -> Vec<u8> {
        let mut out = self.canonical_bytes(curve);
        let sig = self.signature.encode(curve);
        out.extend((sig.len() as u16).to_be_bytes());
        out.extend(sig);
        out
    }

    pub fn decode(curve: &Curve, bytes: &[u8]) -> Result<Self, CertificateDecodeError> {
        let mut r = Reader::new(bytes);
        let err = |m: &str| CertificateDecodeError(m.to_string());
        let id_len = r.u16().ok_or_else(|| err("truncated subject"))? as usize;
        let id = r.take(id_len).ok_or_else(|| err("truncated subject"))?;
        let subject_id = String::from_utf8(id.to_vec()).map_err(|_| err("subject id is not UTF-8"))?;
        let kind = r
            .take(1)
            .and_then(|k| SubjectKind::from_code(k[0]))
            .ok_or_else(|| err("bad subject kind"))?;
        let key_len = r.u16().ok_or_else(|| err("truncated key"))? as usize;
        let key = r.take(key_len).ok_or_else(|| err("truncated key"))?;
        let subject_public_key = curve
            .decode_point(key)
            .map_err(|e| CertificateDecodeError(e.to_string()))?;
        let issued_at = r
            .take(8)
            .map(|b| u64::from_be_bytes(b.try_into().expect("8 bytes")))
            .ok_or_else(|| err("truncated issue epoch"))?;
        let sig_len = r.u16().ok_or_else(|| err("truncated signature"))? as usize;
        let sig = r.take(sig_len).ok_or_else(|| err("truncated signature"))?;
        let signature = Signature::decode(curve, sig).map_err(|e| CertificateDecodeError(e.to_string()))?;
        if !r.is_empty() {
            return Err(err("trailing bytes"));
        }
        Ok(Certificate {
            subject_id,
            subject_kind: kind,
            subject_public_key,
            issued_at,
            signature,
        })
    }

    /// True iff the signature verifies under `issuer_public`.
    pub fn verify(&self, curve: &Curve, issuer_public: &Point) -> bool {
        if !curve.validate_point(&self.subject_public_key) || self.subject_public_key.is_identity() {
            return false;
        }
        ecc::verify(
            curve,
            issuer_public,
            &self.canonical_bytes(curve),
            &self.signature,
        )
        .unwrap_or(false)
    }
}

/// Minimal cursor for length-prefixed binary fields.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.buf.len() < n {
            return None;
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Some(head)
    }

    pub(crate) fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_be_bytes([b[0], b[1]]))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserRecord {
    pub username: String,
    pub password_salt: [u8; 16],
    pub password_hash: [u8; 32],
    pub mac: MacAddress,
    pub public_key: Point,
    pub certificate: Certificate,
    pub status: RecordStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Gateway,
    IotDevice,
}

impl DeviceKind {
    fn as_str(self) -> &'static str {
        match self {
            DeviceKind::Gateway => "gateway",
            DeviceKind::IotDevice => "iot_device",
        }
    }

    fn subject_kind(self) -> SubjectKind {
        match self {
            DeviceKind::Gateway => SubjectKind::Gateway,
            DeviceKind::IotDevice => SubjectKind::IotDevice,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceRecord {
    pub device_id: String,
    pub kind: DeviceKind,
    pub gateway_id: Option<String>,
    pub private_address: Ipv4Addr,
    pub public_key: Point,
    pub certificate: Certificate,
    pub status: RecordStatus,
}

/// The VPN server's own certificate, issued by the same root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerRecord {
    pub server_id: String,
    pub certificate: Certificate,
    pub status: RecordStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthDecision {
    Accepted,
    BadCredentials,
    MacMismatch,
    Revoked,
}

/// What a handshake needs to judge a peer certificate.
pub trait TrustStore {
    fn curve(&self) -> &Curve;
    fn root_public(&self) -> &Point;
    /// Status of exactly this certificate. A certificate that was never issued
    /// by the registry, including one reusing a registered subject id, is
    /// `Unknown`.
    fn certificate_status(&self, cert: &Certificate) -> CertStatus;
}

pub struct Registry {
    curve: Curve,
    root: KeyPair,
    rng_seed: [u8; 32],
    rng: ChaCha20Rng,
    epoch: u64,
    users: BTreeMap<String, UserRecord>,
    devices: BTreeMap<String, DeviceRecord>,
    servers: BTreeMap<String, ServerRecord>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("curve", &self.curve.name())
            .field("epoch", &self.epoch)
            .field("users", &self.users.len())
            .field("devices", &self.devices.len())
            .finish_non_exhaustive()
    }
}

fn password_hash(salt: &[u8; 16], password: &str) -> [u8; 32] {
    sha256(&[salt, password.as_bytes()])
}

fn check_identifier(id: &str) -> Result<(), RegistryError> {
    let ok =
        !id.is_empty() && id.len() <= MAX_ID_LEN && id != "-" && id.chars().all(|c| c.is_ascii_graphic());
    if ok {
        Ok(())
    } else {
        Err(RegistryError::InvalidIdentifier(id.to_string()))
    }
}

impl Registry {
    /// A fresh registry whose root key and salts derive from `seed`.
    pub fn new(curve: Curve, seed: [u8; 32]) -> Self {
        let mut rng = ChaCha20Rng::from_seed(seed);
        let root = ecc::keygen(&curve, &mut rng);
        Registry {
            curve,
            root,
            rng_seed: seed,
            rng,
            epoch: 0,
            users: BTreeMap::new(),
            devices: BTreeMap::new(),
            servers: BTreeMap::new(),
        }
    }

    pub fn curve(&self) -> &Curve {
        &self.curve
    }

    pub fn root_public(&self) -> &Point {
        self.root.public()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn id_taken(&self, id: &str) -> bool {
        self.users.contains_key(id) || self.devices.contains_key(id) || self.servers.contains_key(id)
    }

    fn issue(&mut self, id: &str, kind: SubjectKind, key: &Point) -> Result<Certificate, RegistryError> {
        if key.is_identity() || !self.curve.validate_point(key) {
            return Err(EccError::InvalidPoint(self.curve.name().to_string()).into());
        }
        self.epoch += 1;
        Ok(Certificate::issue(
            &self.curve,
            &self.root,
            id,
            kind,
            key,
            self.epoch,
        )?)
    }

    pub fn register_server(
        &mut self,
        server_id: &str,
        public_key: &Point,
    ) -> Result<ServerRecord, RegistryError> {
        check_identifier(server_id)?;
        if self.id_taken(server_id) {
            return Err(RegistryError::DuplicateId(server_id.to_string()));
        }
        let certificate = self.issue(server_id, SubjectKind::Server, public_key)?;
        let record = ServerRecord {
            server_id: server_id.to_string(),
            certificate,
            status: RecordStatus::Active,
        };
        self.servers.insert(server_id.to_string(), record.clone());
        Ok(record)
    }

    pub fn register_user(
        &mut self,
        username: &str,
        password: &str,
        mac: MacAddress,
        public_key: &Point,
    ) -> Result<UserRecord, RegistryError> {
        check_identifier(username)?;
        if self.id_taken(username) {
            return Err(RegistryError::DuplicateUsername(username.to_string()));
        }
        let certificate = self.issue(username, SubjectKind::User, public_key)?;
        let mut password_salt = [0u8; 16];
        self.rng.fill_bytes(&mut password_salt);
        let record = UserRecord {
            username: username.to_string(),
            password_hash: password_hash(&password_salt, password),
            password_salt,
            mac,
            public_key: public_key.clone(),
            certificate,
            status: RecordStatus::Active,
        };
        self.users.insert(username.to_string(), record.clone());
        Ok(record)
    }

    pub fn register_device(
        &mut self,
        device_id: &str,
        kind: DeviceKind,
        gateway_id: Option<&str>,
        private_address: Ipv4Addr,
        public_key: &Point,
    ) -> Result<DeviceRecord, RegistryError> {
        check_identifier(device_id)?;
        if self.id_taken(device_id) {
            return Err(RegistryError::DuplicateId(device_id.to_string()));
        }
        if !private_address.is_private() {
            return Err(RegistryError::NotPrivateAddress(private_address));
        }
        if self
            .devices
            .values()
            .any(|d| d.private_address == private_address)
        {
            return Err(RegistryError::DuplicateAddress(private_address));
        }
        match (kind, gateway_id) {
            (DeviceKind::Gateway, Some(_)) => return Err(RegistryError::GatewayOfGateway),
            (DeviceKind::IotDevice, None) => return Err(RegistryError::UnknownGateway(String::new())),
            (DeviceKind::IotDevice, Some(gw)) => {
                let known = self
                    .devices
                    .get(gw)
                    .is_some_and(|d| d.kind == DeviceKind::Gateway);
                if !known {
                    return Err(RegistryError::UnknownGateway(gw.to_string()));
                }
            }
            (DeviceKind::Gateway, None) => {}
        }
        let certificate = self.issue(device_id, kind.subject_kind(), public_key)?;
        let record = DeviceRecord {
            device_id: device_id.to_string(),
            kind,
            gateway_id: gateway_id.map(str::to_string),
            private_address,
            public_key: public_key.clone(),
            certificate,
            status: RecordStatus::Active,
        };
        self.devices.insert(device_id.to_string(), record.clone());
        Ok(record)
    }

    /// Password first, then revocation, then the MAC fail-safe.
    pub fn authenticate_credentials(
        &self,
        username: &str,
        password: &str,
        presented_mac: MacAddress,
    ) -> AuthDecision {
        let Some(user) = self.users.get(username) else {
            return AuthDecision::BadCredentials;
        };
        if !ct_eq(&password_hash(&user.password_salt, password), &user.password_hash) {
            return AuthDecision::BadCredentials;
        }
        if user.status == RecordStatus::Revoked {
            return AuthDecision::Revoked;
        }
        if presented_mac != user.mac {
            return AuthDecision::MacMismatch;
        }
        AuthDecision::Accepted
    }

    /// Marks a subject revoked and returns its certificate.
    pub fn revoke(&mut self, subject_id: &str) -> Result<Certificate, RegistryError> {
        if let Some(u) = self.users.get_mut(subject_id) {
            u.status = RecordStatus::Revoked;
            return Ok(u.certificate.clone());
        }
        if let Some(d) = self.devices.get_mut(subject_id) {
            d.status = RecordStatus::Revoked;
            return Ok(d.certificate.clone());
        }
        if let Some(s) = self.servers.get_mut(subject_id) {
            s.status = RecordStatus::Revoked;
            return Ok(s.certificate.clone());
        }
        Err(RegistryError::UnknownSubject(subject_id.to_string()))
    }

    fn record(&self, subject_id: &str) -> Option<(&Certificate, RecordStatus)> {
        if let Some(u) = self.users.get(subject_id) {
            return Some((&u.certificate, u.status));
        }
        if let Some(d) = self.devices.get(subject_id) {
            return Some((&d.certificate, d.status));
        }
        self.servers.get(subject_id).map(|s| (&s.certificate, s.status))
    }

    pub fn lookup_certificate_status(&self, subject_id: &str) -> CertStatus {
        match self.record(subject_id) {
            None => CertStatus::Unknown,
            Some((_, RecordStatus::Active)) => CertStatus::Active,
            Some((_, RecordStatus::Revoked)) => CertStatus::Revoked,
        }
    }

    pub fn user(&self, username: &str) -> Option<&UserRecord> {
        self.users.get(username)
    }

    pub fn device(&self, device_id: &str) -> Option<&DeviceRecord> {
        self.devices.get(device_id)
    }

    pub fn server(&self, server_id: &str) -> Option<&ServerRecord> {
        self.servers.get(server_id)
    }

    pub fn users(&self) -> impl Iterator<Item = &UserRecord> {
        self.users.values()
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceRecord> {
        self.devices.values()
    }

    /// Every certificate the registry has issued.
    pub fn certificates(&self) -> impl Iterator<Item = &Certificate> {
        self.servers
            .values()
            .map(|s| &s.certificate)
            .chain(self.users.values().map(|u| &u.certificate))
            .chain(self.devices.values().map(|d| &d.certificate))
    }

    /// Serializes the registry in the line-oriented snapshot format.
    pub fn to_snapshot(&self) -> String {
        let c = &self.curve;
        let status = |s: RecordStatus| match s {
            RecordStatus::Active => "active",
            RecordStatus::Revoked => "revoked",
        };
        let mut lines = vec![
            SNAPSHOT_HEADER.to_string(),
            format!("curve\t{}", c.name()),
            format!("root\t{}", hex::encode(c.encode_scalar(self.root.secret()))),
            format!("rng\t{}\t{}", hex::encode(self.rng_seed), self.rng.get_word_pos()),
            format!("epoch\t{}", self.epoch),
        ];
        for s in self.servers.values() {
            lines.push(format!(
                "server\t{}\t{}\t{}",
                s.server_id,
                hex::encode(s.certificate.encode(c)),
                status(s.status)
            ));
        }
        for u in self.users.values() {
            lines.push(format!(
                "user\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                u.username,
                hex::encode(u.password_salt),
                hex::encode(u.password_hash),
                u.mac,
                hex::encode(c.encode_point(&u.public_key)),
                hex::encode(u.certificate.encode(c)),
                status(u.status)
            ));
        }
        for d in self.devices.values() {
            lines.push(format!(
                "device\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                d.device_id,
                d.kind.as_str(),
                d.gateway_id.as_deref().unwrap_or("-"),
                d.private_address,
                hex::encode(c.encode_point(&d.public_key)),
                hex::encode(d.certificate.encode(c)),
                status(d.status)
            ));
        }
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn from_snapshot(text: &str) -> Result<Self, RegistryError> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l).unwrap_or_default();
        if header != SNAPSHOT_HEADER {
            return match header.strip_prefix(SNAPSHOT_MAGIC) {
                Some(version) => Err(RegistryError::UnsupportedVersion(version.trim().to_string())),
                None => Err(RegistryError::Snapshot {
                    line: 1,
                    message: "missing registry header".into(),
                }),
            };
        }
        let mut curve: Option<Curve> = None;
        let mut root: Option<KeyPair> = None;
        let mut rng: Option<([u8; 32], u128)> = None;
        let mut epoch = 0u64;
        let mut users = BTreeMap::new();
        let mut devices = BTreeMap::new();
        let mut servers = BTreeMap::new();

        for (idx, line) in lines {
            let line_no = idx + 1;
            let bad = |message: String| RegistryError::Snapshot {
                line: line_no,
                message,
            };
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let need = |n: usize| {
                if fields.len() == n {
                    Ok(())
                } else {
                    Err(bad(format!("expected {n} fields, found {}", fields.len())))
                }
            };
            let unhex = |s: &str| hex::decode(s).map_err(|e| bad(format!("bad hex: {e}")));
            let parse_status = |s: &str| match s {
                "active" => Ok(RecordStatus::Active),
                "revoked" => Ok(RecordStatus::Revoked),
                other => Err(bad(format!("bad status {other:?}"))),
            };
            match fields[0] {
                "curve" => {
                    need(2)?;
                    curve = Some(Curve::by_name(fields[1]).map_err(|e| bad(e.to_string()))?);
                }
                kind => {
                    let c = curve
                        .as_ref()
                        .ok_or_else(|| bad("curve must precede other records".into()))?;
                    let cert = |s: &str| Certificate::decode(c, &unhex(s)?).map_err(|e| bad(e.to_string()));
                    let point = |s: &str| c.decode_point(&unhex(s)?).map_err(|e| bad(e.to_string()));
                    match kind {
                        "root" => {
                            need(2)?;
                            let d = num_bigint::BigUint::from_bytes_be(&unhex(fields[1])?);
                            root = Some(KeyPair::from_secret(c, d).map_err(|e| bad(e.to_string()))?);
                        }
                        "rng" => {
                            need(3)?;
                            let seed: [u8; 32] = unhex(fields[1])?
                                .try_into()
                                .map_err(|_| bad("rng seed must be 32 bytes".into()))?;
                            let pos = fields[2].parse().map_err(|_| bad("bad rng position".into()))?;
                            rng = Some((seed, pos));
                        }
                        "epoch" => {
                            need(2)?;
                            epoch = fields[1].parse().map_err(|_| bad("bad epoch".into()))?;
                        }
                        "server" => {
                            need(4)?;
                            let rec = ServerRecord {
                                server_id: fields[1].to_string(),
                                certificate: cert(fields[2])?,
                                status: parse_status(fields[3])?,
                            };
                            servers.insert(rec.server_id.clone(), rec);
                        }
                        "user" => {
                            need(8)?;
                            let rec = UserRecord {
                                username: fields[1].to_string(),
                                password_salt: unhex(fields[2])?
                                    .try_into()
                                    .map_err(|_| bad("salt must be 16 bytes".into()))?,
                                password_hash: unhex(fields[3])?
                                    .try_into()
                                    .map_err(|_| bad("hash must be 32 bytes".into()))?,
                                mac: fields[4].parse().map_err(|e: MacParseError| bad(e.to_string()))?,
                                public_key: point(fields[5])?,
                                certificate: cert(fields[6])?,
                                status: parse_status(fields[7])?,
                            };
                            if rec.certificate.subject_public_key != rec.public_key {
                                return Err(bad("certificate key does not match record".into()));
                            }
                            users.insert(rec.username.clone(), rec);
                        }
                        "device" => {
                            need(8)?;
                            let kind = match fields[2] {
                                "gateway" => DeviceKind::Gateway,
                                "iot_device" => DeviceKind::IotDevice,
                                other => return Err(bad(format!("bad device kind {other:?}"))),
                            };
                            let rec = DeviceRecord {
                                device_id: fields[1].to_string(),
                                kind,
                                gateway_id: (fields[3] != "-").then(|| fields[3].to_string()),
                                private_address: fields[4]
                                    .parse()
                                    .map_err(|_| bad("bad private address".into()))?,
                                public_key: point(fields[5])?,
                                certificate: cert(fields[6])?,
                                status: parse_status(fields[7])?,
                            };
                            if rec.certificate.subject_public_key != rec.public_key {
                                return Err(bad("certificate key does not match record".into()));
                            }
                            devices.insert(rec.device_id.clone(), rec);
                        }
                        other => return Err(bad(format!("unknown record type {other:?}"))),
                    }
                }
            }
        }

        let missing = |what: &str| RegistryError::Snapshot {
            line: 0,
            message: format!("snapshot has no {what} record"),
        };
        let curve = curve.ok_or_else(|| missing("curve"))?;
        let root = root.ok_or_else(|| missing("root"))?;
        let (rng_seed, word_pos) = rng.ok_or_else(|| missing("rng"))?;
        for d in devices.values() {
            if let Some(gw) = &d.gateway_id {
                if devices.get(gw).map(|g: &DeviceRecord| g.kind) != Some(DeviceKind::Gateway) {
                    return Err(RegistryError::UnknownGateway(gw.clone()));
                }
            }
        }
        let mut rng = ChaCha20Rng::from_seed(rng_seed);
        rng.set_word_pos(word_pos);
        Ok(Registry {
            curve,
            root,
            rng_seed,
            rng,
            epoch,
            users,
            devices,
            servers,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RegistryError> {
        std::fs::write(path, self.to_snapshot())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RegistryError> {
        Self::from_snapshot(&std::fs::read_to_string(path)?)
    }
}

impl TrustStore for Registry {
    fn curve(&self) -> &Curve {
        &self.curve
    }

    fn root_public(&self) -> &Point {
        self.root.public()
    }

    fn certificate_status(&self, cert: &Certificate) -> CertStatus {
        match self.record(&cert.subject_id) {
            Some((issued, status)) if issued == cert => match status {
                RecordStatus::Active => CertStatus::Active,
                RecordStatus::Revoked => CertStatus::Revoked,
            },
            _ => CertStatus::Unknown,
        }
    }
}
