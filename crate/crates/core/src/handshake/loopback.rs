//! In-memory driver that runs both ends of a handshake against each other.

use super::message::{decode_flight, encode_flight, flight_number};
use super::state::{HandshakeConfig, HandshakeState, Identity, Role};
use super::SessionKeys;
use crate::ecc::{self, Curve};
use crate::hash::sha256;
use crate::registry::{DeviceKind, Registry, TrustStore};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use std::net::Ipv4Addr;

pub const LOOPBACK_SERVER_ID: &str = "vpn-server";
pub const LOOPBACK_CLIENT_ID: &str = "gw-1";
const LOOPBACK_CLIENT_ADDRESS: [u8; 4] = [100, 64, 1, 1];

/// A registry holding one server and one gateway, plus their identities.
pub fn provision_pair(curve: Curve, seed: u64) -> (Registry, Identity, Identity) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut registry = Registry::new(curve.clone(), sha256(&[b"registry", &seed.to_be_bytes()]));
    let server_key = ecc::keygen(&curve, &mut rng);
    let client_key = ecc::keygen(&curve, &mut rng);
    let server = registry
        .register_server(LOOPBACK_SERVER_ID, server_key.public())
        .expect("fresh registry");
    let client = registry
        .register_device(
            LOOPBACK_CLIENT_ID,
            DeviceKind::Gateway,
            None,
            Ipv4Addr::new(10, 1, 0, 1),
            client_key.public(),
        )
        .expect("fresh registry");
    (
        registry,
        Identity {
            keypair: server_key,
            certificate: server.certificate,
        },
        Identity {
            keypair: client_key,
            certificate: client.certificate,
        },
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct FlightRecord {
    pub sender: Role,
    /// Flight number 1..=6 when the datagram parses as one.
    pub flight: Option<u8>,
    pub messages: Vec<&'static str>,
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
}

mod hex_bytes {
    pub fn serialize<S: serde::Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }
}

#[derive(Debug)]
pub struct LoopbackOutcome {
    pub initiator: HandshakeState,
    pub responder: HandshakeState,
    /// Every datagram as delivered, after tampering.
    pub flights: Vec<FlightRecord>,
}

impl LoopbackOutcome {
    pub fn established(&self) -> bool {
        self.initiator.session_keys().is_some() && self.responder.session_keys().is_some()
    }

    pub fn initiator_keys(&self) -> Option<&SessionKeys> {
        self.initiator.session_keys()
    }

    pub fn responder_keys(&self) -> Option<&SessionKeys> {
        self.responder.session_keys()
    }
}

/// One side's configuration and randomness for [`run_loopback`].
#[derive(Debug, Clone)]
pub struct LoopbackParty {
    pub config: HandshakeConfig,
    pub seed: [u8; 32],
}

impl LoopbackParty {
    pub fn new(config: HandshakeConfig, seed: [u8; 32]) -> Self {
        LoopbackParty { config, seed }
    }
}

/// Runs a handshake to completion with lossless, in-order delivery.
/// `tamper(index, sender, bytes)` may rewrite each datagram before delivery.
pub fn run_loopback(
    trust: &dyn TrustStore,
    initiator: LoopbackParty,
    responder: LoopbackParty,
    mut tamper: impl FnMut(usize, Role, &mut Vec<u8>),
) -> LoopbackOutcome {
    let cookie_secret = sha256(&[b"cookie", &responder.seed]);
    let mut init = HandshakeState::initiator(initiator.config, initiator.seed);
    let mut resp = HandshakeState::responder(
        responder.config,
        cookie_secret,
        &LOOPBACK_CLIENT_ADDRESS,
        responder.seed,
    );
    let mut flights = Vec::new();
    let first = init.start(0).expect("fresh initiator");
    let mut pending = Some((Role::Initiator, encode_flight(&first)));
    let mut now = 0;
    while let Some((sender, mut bytes)) = pending.take() {
        if flights.len() >= 16 {
            break;
        }
        tamper(flights.len(), sender, &mut bytes);
        let parsed = decode_flight(&bytes).ok();
        flights.push(FlightRecord {
            sender,
            flight: parsed.as_deref().and_then(flight_number),
            messages: parsed
                .map(|m| m.iter().map(|m| m.name()).collect())
                .unwrap_or_default(),
            bytes: bytes.clone(),
        });
        now += 1;
        let (target, reply_from) = match sender {
            Role::Initiator => (&mut resp, Role::Responder),
            Role::Responder => (&mut init, Role::Initiator),
        };
        let step = target.process_datagram(&bytes, trust, now);
        pending = step.outbound.map(|b| (reply_from, b));
    }
    LoopbackOutcome {
        initiator: init,
        responder: resp,
        flights,
    }
}
