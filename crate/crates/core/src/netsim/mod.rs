//! Deterministic network simulator: a VPN server, gateways with their IoT
//! devices, remote users and an optional on-path adversary, exchanging
//! datagrams over lossy links in integer epochs.
//!
//! Address plan: the server is `10.0.0.1`, gateway `k` (1-based, in config
//! order) is `10.k.0.1` and its `j`-th device `10.k.0.(j+2)`, user `i` is
//! `10.255.0.(i+1)`. Transport addresses are drawn from `100.64.0.0/10`.
//!
//! All randomness comes from ChaCha20 streams derived from the run seed, and
//! every collection is ordered, so a (scenario, seed) pair fully determines
//! the event log and the report.

mod config;
mod report;

pub use config::{
    AdversaryAction, AdversaryConfig, Behavior, ConfigError, DeviceConfig, GatewayConfig, HandshakeSettings,
    LinkConfig, RandomTraffic, ScenarioConfig, ScheduledAction, Topology, TrafficItem, TunnelMode,
    UserConfig, ADVERSARY_ID, SCHEMA_VERSION,
};
pub use report::{
    count_recovered_payloads, handshake_byte_profile, AdversaryReport, CiaVerdict, DeviceReport, FrameCounts,
    HandshakeByteProfile, HandshakeOutcome, HandshakeRecord, LevelCost, LoginRecord, NodeCounts,
    PacketCounts, SelfSignedAttempt, SimReport, PLAINTEXT_WINDOW,
};

use crate::ecc::{self, Curve};
use crate::handshake::{
    decode_flight, encode_flight, flight_number, HandshakeConfig, HandshakeError, HandshakeState, Identity,
    Role, SessionKeys, SESSION_KEYS_LEN,
};
use crate::hash::sha256;
use crate::registry::{AuthDecision, Certificate, DeviceKind, MacAddress, Registry, SubjectKind};
use crate::tunnel::{
    establish_tunnel, route_inner, InnerPacket, Route, RoutingTable, TunnelError, TunnelFrame, TunnelSession,
    FRAME_HEADER_LEN, FRAME_MAGIC,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};
use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use thiserror::Error;

pub const DEFAULT_SEED: u64 = 1;
const SERVER_PRIVATE: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
const TRANSPORT_BASE: Ipv4Addr = Ipv4Addr::new(100, 64, 0, 1);
const ADVERSARY_TRANSPORT: Ipv4Addr = Ipv4Addr::new(100, 127, 255, 254);
const MAX_REORDER_DELAY: u64 = 3;

#[derive(Debug, Error)]
pub enum NetsimError {
    #[error("invalid scenario: {0}")]
    Config(#[from] ConfigError),
    #[error("registration failed for {node}: {message}")]
    Registration { node: String, message: String },
    #[error("no completed handshake between {initiator} and {responder}")]
    NoHandshake { initiator: String, responder: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    VpnServer,
    Gateway,
    IotDevice,
    User,
    Adversary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Honest,
    Adversary(AdversaryTool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AdversaryTool {
    Replay,
    Inject,
    Mutation,
    Forgery,
    Handshake,
}

#[derive(Debug, Clone)]
struct Datagram {
    src: Ipv4Addr,
    dst: Ipv4Addr,
    bytes: Vec<u8>,
    origin: Origin,
}

impl Datagram {
    fn is_frame(&self) -> bool {
        self.bytes.first() == Some(&FRAME_MAGIC[0])
    }
}

#[derive(Debug)]
struct DeviceState {
    behavior: Behavior,
    gateway: String,
    requests: u64,
    switched_on: bool,
}

impl DeviceState {
    fn respond(&mut self, request: &[u8]) -> Vec<u8> {
        self.requests += 1;
        match self.behavior {
            Behavior::Temperature => {
                let tenths = 180 + (self.requests * 7) % 80;
                format!("temperature={}.{}C", tenths / 10, tenths % 10).into_bytes()
            }
            Behavior::Switch => {
                if request == b"toggle" {
                    self.switched_on = !self.switched_on;
                }
                format!("switch={}", if self.switched_on { "on" } else { "off" }).into_bytes()
            }
            Behavior::Echo => request.to_vec(),
        }
    }

    fn state(&self) -> String {
        match self.behavior {
            Behavior::Temperature => format!("readings={}", self.requests),
            Behavior::Switch => (if self.switched_on { "on" } else { "off" }).to_string(),
            Behavior::Echo => format!("echoed={}", self.requests),
        }
    }
}

struct Slot {
    state: HandshakeState,
    record: Option<usize>,
}

struct Node {
    id: String,
    kind: NodeKind,
    transport: Ipv4Addr,
    private: Ipv4Addr,
    identity: Option<Identity>,
    accepts_handshakes: bool,
    cookie_secret: [u8; 32],
    rng: ChaCha20Rng,
    slots: BTreeMap<Ipv4Addr, Slot>,
    tunnels: BTreeMap<String, TunnelSession>,
    sessions: BTreeMap<[u8; 4], String>,
    routes: RoutingTable,
    outbox: Vec<(String, InnerPacket)>,
    device: Option<DeviceState>,
}

struct HandshakeTrack {
    record: HandshakeRecord,
    keys: [Option<SessionKeys>; 2],
    flights: [Option<Vec<u8>>; 6],
}

struct AdversaryState {
    mac: MacAddress,
    sniffing: bool,
    capture: Vec<Vec<u8>>,
    delivered_frames: Vec<(Ipv4Addr, Ipv4Addr, Vec<u8>)>,
    report: AdversaryReport,
    attempts: Vec<usize>,
}

pub struct Simulation {
    config: ScenarioConfig,
    seed: u64,
    curve: Curve,
    registry: Registry,
    nodes: BTreeMap<String, Node>,
    by_transport: BTreeMap<Ipv4Addr, String>,
    by_private: BTreeMap<Ipv4Addr, String>,
    queue: BTreeMap<(u64, u64), Datagram>,
    next_datagram: u64,
    link_rng: ChaCha20Rng,
    adversary_rng: ChaCha20Rng,
    epoch: u64,
    log: Vec<String>,
    traffic: BTreeMap<u64, Vec<(String, String, Vec<u8>)>>,
    actions: BTreeMap<u64, Vec<AdversaryAction>>,
    frames: FrameCounts,
    packets: PacketCounts,
    logins: Vec<LoginRecord>,
    handshakes: Vec<HandshakeTrack>,
    handshake_index: BTreeMap<(Ipv4Addr, Ipv4Addr), usize>,
    sent_payloads: Vec<Vec<u8>>,
    in_transit: BTreeMap<Vec<u8>, u64>,
    adversary: Option<AdversaryState>,
    report: Option<SimReport>,
}

fn derive_seed(label: &str, seed: u64) -> [u8; 32] {
    sha256(&[b"iotsec/netsim/", label.as_bytes(), &seed.to_be_bytes()])
}

fn transport_address(index: u32) -> Ipv4Addr {
    Ipv4Addr::from(u32::from(TRANSPORT_BASE) + index)
}

/// Builds a simulation and performs registration for every legitimate node.
pub fn build_simulation(config: ScenarioConfig, seed: u64) -> Result<Simulation, NetsimError> {
    Simulation::build(config, seed)
}

/// Builds and runs a scenario, returning the report and the event log.
pub fn run_scenario(config: &ScenarioConfig, seed: u64) -> Result<(SimReport, String), NetsimError> {
    let mut sim = Simulation::build(config.clone(), seed)?;
    let report = sim.run();
    Ok((report, sim.event_log()))
}

impl Simulation {
    pub fn build(config: ScenarioConfig, seed: u64) -> Result<Self, NetsimError> {
        config.validate()?;
        let curve = Curve::by_name(&config.curve).map_err(|e| ConfigError {
            path: "curve".into(),
            message: e.to_string(),
        })?;
        let mut key_rng = ChaCha20Rng::from_seed(derive_seed("keys", seed));
        let mut traffic_rng = ChaCha20Rng::from_seed(derive_seed("traffic", seed));
        let mut registry = Registry::new(curve.clone(), derive_seed("registry", seed));
        let topo = &config.topology;
        let direct = topo.tunnel_mode == TunnelMode::Direct;

        let mut sim = Simulation {
            curve: curve.clone(),
            seed,
            registry: Registry::new(curve.clone(), [0; 32]),
            nodes: BTreeMap::new(),
            by_transport: BTreeMap::new(),
            by_private: BTreeMap::new(),
            queue: BTreeMap::new(),
            next_datagram: 0,
            link_rng: ChaCha20Rng::from_seed(derive_seed("link", seed)),
            adversary_rng: ChaCha20Rng::from_seed(derive_seed("adversary", seed)),
            epoch: 0,
            log: Vec::new(),
            traffic: BTreeMap::new(),
            actions: BTreeMap::new(),
            frames: FrameCounts::default(),
            packets: PacketCounts::default(),
            logins: Vec::new(),
            handshakes: Vec::new(),
            handshake_index: BTreeMap::new(),
            sent_payloads: Vec::new(),
            in_transit: BTreeMap::new(),
            adversary: None,
            report: None,
            config: config.clone(),
        };

        let mut transport_index = 0u32;
        let mut new_node = |id: &str, kind: NodeKind, private: Ipv4Addr, key_rng: &mut ChaCha20Rng| {
            let transport = transport_address(transport_index);
            transport_index += 1;
            Node {
                id: id.to_string(),
                kind,
                transport,
                private,
                identity: None,
                accepts_handshakes: false,
                cookie_secret: key_rng.gen(),
                rng: ChaCha20Rng::from_seed(key_rng.gen()),
                slots: BTreeMap::new(),
                tunnels: BTreeMap::new(),
                sessions: BTreeMap::new(),
                routes: RoutingTable::new(),
                outbox: Vec::new(),
                device: None,
            }
        };
        let reg_err = |node: &str| {
            let node = node.to_string();
            move |e: crate::registry::RegistryError| NetsimError::Registration {
                node,
                message: e.to_string(),
            }
        };

        let mut nodes = Vec::new();
        let server_key = ecc::keygen(&curve, &mut key_rng);
        let rec = registry
            .register_server(&topo.server_id, server_key.public())
            .map_err(reg_err(&topo.server_id))?;
        let mut server = new_node(&topo.server_id, NodeKind::VpnServer, SERVER_PRIVATE, &mut key_rng);
        server.identity = Some(Identity {
            keypair: server_key,
            certificate: rec.certificate,
        });
        server.accepts_handshakes = true;
        nodes.push(server);

        let mut device_gateway = BTreeMap::new();
        for (k, gw) in topo.gateways.iter().enumerate() {
            let octet = (k + 1) as u8;
            let private = Ipv4Addr::new(10, octet, 0, 1);
            let key = ecc::keygen(&curve, &mut key_rng);
            let rec = registry
                .register_device(&gw.id, DeviceKind::Gateway, None, private, key.public())
                .map_err(reg_err(&gw.id))?;
            let mut node = new_node(&gw.id, NodeKind::Gateway, private, &mut key_rng);
            node.identity = Some(Identity {
                keypair: key,
                certificate: rec.certificate,
            });
            node.accepts_handshakes = direct || topo.device_tunnels;
            nodes.push(node);
            for (j, dev) in topo.devices.iter().filter(|d| d.gateway == gw.id).enumerate() {
                let private = Ipv4Addr::new(10, octet, 0, (j + 2) as u8);
                let key = ecc::keygen(&curve, &mut key_rng);
                let rec = registry
                    .register_device(
                        &dev.id,
                        DeviceKind::IotDevice,
                        Some(&gw.id),
                        private,
                        key.public(),
                    )
                    .map_err(reg_err(&dev.id))?;
                let mut node = new_node(&dev.id, NodeKind::IotDevice, private, &mut key_rng);
                node.identity = Some(Identity {
                    keypair: key,
                    certificate: rec.certificate,
                });
                node.device = Some(DeviceState {
                    behavior: dev.behavior,
                    gateway: gw.id.clone(),
                    requests: 0,
                    switched_on: false,
                });
                device_gateway.insert(private, gw.id.clone());
                nodes.push(node);
            }
        }
        for (i, user) in topo.users.iter().enumerate() {
            let private = Ipv4Addr::new(10, 255, 0, (i + 1) as u8);
            let key = ecc::keygen(&curve, &mut key_rng);
            let rec = registry
                .register_user(&user.username, &user.password, user.mac, key.public())
                .map_err(reg_err(&user.username))?;
            let mut node = new_node(&user.username, NodeKind::User, private, &mut key_rng);
            node.identity = Some(Identity {
                keypair: key,
                certificate: rec.certificate,
            });
            nodes.push(node);
        }
        if let Some(adv) = &config.adversary {
            let mut node = new_node(
                ADVERSARY_ID,
                NodeKind::Adversary,
                Ipv4Addr::UNSPECIFIED,
                &mut key_rng,
            );
            node.transport = ADVERSARY_TRANSPORT;
            nodes.push(node);
            sim.adversary = Some(AdversaryState {
                mac: adv.mac,
                sniffing: false,
                capture: Vec::new(),
                delivered_frames: Vec::new(),
                report: AdversaryReport::default(),
                attempts: Vec::new(),
            });
        }

        // routing tables
        let plan = Ipv4Addr::new(10, 0, 0, 0);
        let gateway_addrs: Vec<(Ipv4Addr, String)> = nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Gateway)
            .map(|n| (n.private, n.id.clone()))
            .collect();
        let user_addrs: Vec<(Ipv4Addr, String)> = nodes
            .iter()
            .filter(|n| n.kind == NodeKind::User)
            .map(|n| (n.private, n.id.clone()))
            .collect();
        for node in &mut nodes {
            node.routes = match node.kind {
                NodeKind::VpnServer => {
                    let mut t = RoutingTable::new();
                    for (a, gw) in gateway_addrs.iter().chain(&user_addrs) {
                        t.insert(*a, gw.clone());
                    }
                    for (a, gw) in &device_gateway {
                        t.insert(*a, gw.clone());
                    }
                    t
                }
                NodeKind::Gateway => {
                    let mut t = RoutingTable::new().with_mediator(plan, 8, &topo.server_id);
                    if direct {
                        for (a, u) in &user_addrs {
                            t.insert(*a, u.clone());
                        }
                    }
                    t
                }
                NodeKind::User => {
                    let mut t = RoutingTable::new().with_mediator(plan, 8, &topo.server_id);
                    if direct {
                        for (a, gw) in gateway_addrs.iter().map(|(a, g)| (a, g)).chain(&device_gateway) {
                            t.insert(*a, gw.clone());
                        }
                    }
                    t
                }
                NodeKind::IotDevice => {
                    let gw = &node.device.as_ref().expect("device state").gateway;
                    RoutingTable::new().with_mediator(plan, 8, gw)
                }
                NodeKind::Adversary => RoutingTable::new(),
            };
        }

        for node in nodes {
            sim.by_transport.insert(node.transport, node.id.clone());
            if node.kind != NodeKind::Adversary {
                sim.by_private.insert(node.private, node.id.clone());
            }
            sim.nodes.insert(node.id.clone(), node);
        }
        sim.registry = registry;

        for item in &config.traffic {
            sim.traffic.entry(item.at).or_default().push((
                item.from.clone(),
                item.to.clone(),
                item.payload.as_bytes().to_vec(),
            ));
        }
        for gen in &config.random_traffic {
            let per = u64::from(gen.per_epoch);
            for k in 0..u64::from(gen.count) {
                let len = traffic_rng.gen_range(gen.min_len..=gen.max_len);
                let mut payload = vec![0u8; len];
                traffic_rng.fill_bytes(&mut payload);
                sim.traffic.entry(gen.start + k / per).or_default().push((
                    gen.from.clone(),
                    gen.to.clone(),
                    payload,
                ));
            }
        }
        if let Some(adv) = &config.adversary {
            for a in &adv.actions {
                sim.actions.entry(a.at).or_default().push(a.action.clone());
            }
        }

        let registered: Vec<Value> = sim
            .nodes
            .values()
            .filter(|n| n.kind != NodeKind::Adversary)
            .map(|n| {
                json!({
                    "node": n.id,
                    "kind": n.kind,
                    "private_address": n.private.to_string(),
                    "transport_address": n.transport.to_string(),
                })
            })
            .collect();
        for r in registered {
            sim.log_event("registered", r);
        }
        Ok(sim)
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn curve(&self) -> &Curve {
        &self.curve
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_kind(&self, id: &str) -> Option<NodeKind> {
        self.nodes.get(id).map(|n| n.kind)
    }

    pub fn private_address(&self, id: &str) -> Option<Ipv4Addr> {
        self.nodes.get(id).map(|n| n.private)
    }

    /// Line-delimited JSON, one event per line.
    pub fn event_log(&self) -> String {
        let mut s = self.log.join("\n");
        if !s.is_empty() {
            s.push('\n');
        }
        s
    }

    pub fn report(&self) -> Option<&SimReport> {
        self.report.as_ref()
    }

    fn log_event(&mut self, event: &str, fields: Value) {
        let mut map = match fields {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        map.insert("epoch".into(), self.epoch.into());
        map.insert("event".into(), event.into());
        self.log.push(Value::Object(map).to_string());
    }

    fn name_of(&self, addr: Ipv4Addr) -> String {
        self.by_transport
            .get(&addr)
            .cloned()
            .unwrap_or_else(|| addr.to_string())
    }

    /// Runs to quiescence or `max_epochs`. Calling it again returns the
    /// stored report.
    pub fn run(&mut self) -> SimReport {
        if let Some(r) = &self.report {
            return r.clone();
        }
        let last_scheduled = self.config.last_scheduled_epoch();
        let mut quiescent = false;
        let mut epochs_run = 0;
        for epoch in 0..self.config.max_epochs {
            self.epoch = epoch;
            epochs_run = epoch + 1;
            if epoch == 0 {
                self.start_sessions();
            }
            if let Some(actions) = self.actions.remove(&epoch) {
                for a in actions {
                    self.adversary_action(a);
                }
            }
            if let Some(items) = self.traffic.remove(&epoch) {
                for (from, to, payload) in items {
                    let src = self.nodes[&from].private;
                    let dst = self.nodes[&to].private;
                    self.originate(&from, InnerPacket::new(src, dst, payload));
                }
            }
            self.deliver_due();
            self.drive_timeouts();
            self.flush_outboxes();
            let active = self
                .nodes
                .values()
                .any(|n| n.slots.values().any(|s| !s.state.is_terminal()));
            if epoch >= last_scheduled && self.queue.is_empty() && !active {
                quiescent = true;
                break;
            }
        }
        let report = self.finish(epochs_run, quiescent);
        self.report = Some(report.clone());
        report
    }

    fn start_sessions(&mut self) {
        let topo = self.config.topology.clone();
        let server = topo.server_id.clone();
        for gw in &topo.gateways {
            self.start_handshake(&gw.id, &server);
        }
        for user in &topo.users {
            let decision = self
                .registry
                .authenticate_credentials(&user.username, &user.password, user.mac);
            self.logins.push(LoginRecord {
                epoch: self.epoch,
                username: user.username.clone(),
                decision,
            });
            self.log_event("login", json!({ "user": user.username, "decision": decision }));
            if decision != AuthDecision::Accepted {
                continue;
            }
            self.start_handshake(&user.username, &server);
            if topo.tunnel_mode == TunnelMode::Direct {
                for gw in &topo.gateways {
                    self.start_handshake(&user.username, &gw.id);
                }
            }
        }
        if topo.device_tunnels {
            for dev in &topo.devices {
                self.start_handshake(&dev.id, &dev.gateway);
            }
        }
    }

    fn handshake_config(&self, identity: Identity, peer: &str) -> HandshakeConfig {
        let mut cfg = HandshakeConfig::new(self.curve.clone(), identity)
            .expect_peer(peer)
            .with_timeout(self.config.handshake.timeout_epochs);
        cfg.max_retransmits = self.config.handshake.max_retransmits;
        cfg
    }

    fn new_track(&mut self, initiator: &str, responder: &str, key: (Ipv4Addr, Ipv4Addr)) -> usize {
        let idx = self.handshakes.len();
        self.handshakes.push(HandshakeTrack {
            record: HandshakeRecord {
                initiator: initiator.to_string(),
                responder: responder.to_string(),
                outcome: HandshakeOutcome::Incomplete,
                error: None,
                responder_error: None,
                started_at: self.epoch,
                established_at: None,
                retransmits: 0,
                keys_match: None,
                flight_bytes: [0; 6],
                total_bytes: 0,
            },
            keys: [None, None],
            flights: Default::default(),
        });
        self.handshake_index.insert(key, idx);
        idx
    }

    fn start_handshake(&mut self, from: &str, to: &str) {
        let identity = self.nodes[from].identity.clone().expect("registered node");
        let cfg = self.handshake_config(identity, to);
        let (src, dst) = (self.nodes[from].transport, self.nodes[to].transport);
        let node = self.nodes.get_mut(from).expect("known node");
        let mut state = HandshakeState::initiator(cfg, node.rng.gen());
        let first = state.start(self.epoch).expect("fresh initiator");
        let idx = self.new_track(from, to, (src, dst));
        self.nodes.get_mut(from).expect("known node").slots.insert(
            dst,
            Slot {
                state,
                record: Some(idx),
            },
        );
        self.log_event("handshake_started", json!({ "initiator": from, "responder": to }));
        self.send(src, dst, encode_flight(&first), Origin::Honest);
    }

    fn origin_of(&self, node_id: &str) -> Origin {
        if self.nodes[node_id].kind == NodeKind::Adversary {
            Origin::Adversary(AdversaryTool::Handshake)
        } else {
            Origin::Honest
        }
    }

    fn send(&mut self, src: Ipv4Addr, dst: Ipv4Addr, bytes: Vec<u8>, origin: Origin) {
        let dg = Datagram {
            src,
            dst,
            bytes,
            origin,
        };
        let is_frame = dg.is_frame();
        if !is_frame {
            self.note_flight(&dg);
        }
        if let (Some(adv), Origin::Honest) = (&mut self.adversary, origin) {
            if adv.sniffing {
                adv.report.captured_datagrams += 1;
                adv.report.captured_bytes += dg.bytes.len() as u64;
                adv.capture.push(dg.bytes.clone());
            }
        }
        let link = self.config.link.clone();
        let copies = if origin == Origin::Honest && self.link_rng.gen_bool(link.duplicate_rate) {
            2
        } else {
            1
        };
        let mut lost = Vec::new();
        for copy in 0..copies {
            if is_frame {
                self.frames.sent += 1;
                if copy == 1 {
                    self.frames.link_duplicates += 1;
                }
            }
            let mut delay = link.delay;
            if origin == Origin::Honest {
                if self.link_rng.gen_bool(link.loss_rate) {
                    if is_frame {
                        self.frames.dropped += 1;
                    }
                    lost.push(true);
                    continue;
                }
                if self.link_rng.gen_bool(link.reorder_rate) {
                    delay += self.link_rng.gen_range(1..=MAX_REORDER_DELAY);
                }
            }
            lost.push(false);
            let id = self.next_datagram;
            self.next_datagram += 1;
            self.queue.insert((self.epoch + delay, id), dg.clone());
        }
        let fields = json!({
            "from": self.name_of(src),
            "to": self.name_of(dst),
            "kind": if is_frame { "frame" } else { "handshake" },
            "len": dg.bytes.len(),
            "lost": lost,
            "adversarial": origin != Origin::Honest,
        });
        self.log_event("send", fields);
    }

    fn note_flight(&mut self, dg: &Datagram) {
        let Some(n) = decode_flight(&dg.bytes).ok().as_deref().and_then(flight_number) else {
            return;
        };
        let key = if n % 2 == 1 {
            (dg.src, dg.dst)
        } else {
            (dg.dst, dg.src)
        };
        if let Some(&idx) = self.handshake_index.get(&key) {
            let slot = &mut self.handshakes[idx].flights[usize::from(n) - 1];
            if slot.is_none() {
                *slot = Some(dg.bytes.clone());
            }
        }
    }

    fn deliver_due(&mut self) {
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > self.epoch {
                break;
            }
            let dg = entry.remove();
            let Some(node_id) = self.by_transport.get(&dg.dst).cloned() else {
                if dg.is_frame() {
                    self.frames.dropped += 1;
                }
                continue;
            };
            if dg.is_frame() {
                self.on_frame(&node_id, dg);
            } else {
                self.on_handshake_datagram(&node_id, dg);
            }
        }
    }

    fn on_handshake_datagram(&mut self, node_id: &str, dg: Datagram) {
        let now = self.epoch;
        let curve = self.curve.clone();
        let (timeout, max_retransmits) = (
            self.config.handshake.timeout_epochs,
            self.config.handshake.max_retransmits,
        );
        let record_key = (dg.src, self.nodes[node_id].transport);
        let fresh_record = self.handshake_index.get(&record_key).copied();
        let node = self.nodes.get_mut(node_id).expect("known node");
        let step = if let Some(slot) = node.slots.get_mut(&dg.src) {
            slot.state.process_datagram(&dg.bytes, &self.registry, now)
        } else if node.accepts_handshakes {
            let identity = node.identity.clone().expect("responders are registered");
            let mut cfg = HandshakeConfig::new(curve, identity).with_timeout(timeout);
            cfg.max_retransmits = max_retransmits;
            let mut state =
                HandshakeState::responder(cfg, node.cookie_secret, &dg.src.octets(), node.rng.gen());
            let step = state.process_datagram(&dg.bytes, &self.registry, now);
            if state.phase() != crate::handshake::Phase::Idle {
                node.slots.insert(
                    dg.src,
                    Slot {
                        state,
                        record: fresh_record,
                    },
                );
            }
            step
        } else {
            let fields = json!({ "node": node_id, "from": self.name_of(dg.src) });
            self.log_event("handshake_ignored", fields);
            return;
        };
        self.apply_step(node_id, dg.src, step.outbound, step.session_keys, step.error);
    }

    fn apply_step(
        &mut self,
        node_id: &str,
        peer: Ipv4Addr,
        outbound: Option<Vec<u8>>,
        keys: Option<SessionKeys>,
        error: Option<HandshakeError>,
    ) {
        let own = self.nodes[node_id].transport;
        if let Some(bytes) = outbound {
            let origin = self.origin_of(node_id);
            self.send(own, peer, bytes, origin);
        }
        let Some(slot) = self.nodes[node_id].slots.get(&peer) else {
            return;
        };
        let role = slot.state.role();
        let record = slot.record;
        let peer_id = slot.state.peer_certificate().map(|c| c.subject_id.clone());
        let side = match role {
            Role::Initiator => 0,
            Role::Responder => 1,
        };
        if let Some(keys) = keys {
            let peer_id = peer_id.expect("established peers are certified");
            let node = self.nodes.get_mut(node_id).expect("known node");
            if let Some(old) = node.tunnels.get(&peer_id) {
                let sid = old.session_id();
                node.sessions.remove(&sid);
            }
            node.sessions.insert(keys.session_id, peer_id.clone());
            node.tunnels.insert(
                peer_id.clone(),
                establish_tunnel(&keys, role, Route::new(node_id, &peer_id)),
            );
            if let Some(idx) = record {
                let track = &mut self.handshakes[idx];
                if role == Role::Initiator {
                    track.record.established_at = Some(self.epoch);
                }
                track.keys[side] = Some(keys.clone());
            }
            if let Some(adv) = &mut self.adversary {
                if node_id == ADVERSARY_ID {
                    adv.report.handshakes_established += 1;
                }
            }
            self.log_event(
                "tunnel_established",
                json!({
                    "node": node_id,
                    "peer": peer_id,
                    "role": role,
                    "session_id": hex::encode(keys.session_id),
                }),
            );
        }
        if let Some(err) = error {
            if let Some(idx) = record {
                let r = &mut self.handshakes[idx].record;
                let slot = if side == 0 {
                    &mut r.error
                } else {
                    &mut r.responder_error
                };
                if slot.is_none() {
                    *slot = Some(err.to_string());
                }
            }
            if role == Role::Responder {
                self.nodes
                    .get_mut(node_id)
                    .expect("known node")
                    .slots
                    .remove(&peer);
            }
            self.log_event(
                "handshake_failed",
                json!({
                    "node": node_id,
                    "peer": self.name_of(peer),
                    "role": role,
                    "error": err,
                }),
            );
        }
    }

    fn drive_timeouts(&mut self) {
        let now = self.epoch;
        let mut due = Vec::new();
        for (id, node) in &self.nodes {
            for (addr, slot) in &node.slots {
                if slot.state.next_timeout().is_some_and(|t| t <= now) {
                    due.push((id.clone(), *addr));
                }
            }
        }
        for (id, addr) in due {
            let slot = self
                .nodes
                .get_mut(&id)
                .and_then(|n| n.slots.get_mut(&addr))
                .expect("collected above");
            let record = slot.record;
            match slot.state.on_timeout(now) {
                Ok(msgs) if msgs.is_empty() => {}
                Ok(msgs) => {
                    if let Some(idx) = record {
                        self.handshakes[idx].record.retransmits += 1;
                    }
                    self.log_event("retransmit", json!({ "node": id, "peer": self.name_of(addr) }));
                    self.apply_step(&id, addr, Some(encode_flight(&msgs)), None, None);
                }
                Err(err) => {
                    let abort = err.abort_message().map(|m| m.encode());
                    self.apply_step(&id, addr, abort, None, Some(err));
                }
            }
        }
    }

    fn on_frame(&mut self, node_id: &str, dg: Datagram) {
        let node = self.nodes.get_mut(node_id).expect("known node");
        let result = TunnelFrame::decode(&dg.bytes).and_then(|frame| {
            let peer = node
                .sessions
                .get(&frame.session_id)
                .cloned()
                .ok_or(TunnelError::WrongSession)?;
            let tunnel = node.tunnels.get_mut(&peer).expect("session has a tunnel");
            tunnel.decapsulate(&frame).map(|p| (peer, p))
        });
        let tool = match dg.origin {
            Origin::Adversary(t) => Some(t),
            Origin::Honest => None,
        };
        match result {
            Ok((peer, packet)) => {
                self.frames.delivered += 1;
                if let Some(adv) = &mut self.adversary {
                    if tool.is_some() {
                        adv.report.frames_accepted += 1;
                    } else {
                        adv.delivered_frames.push((dg.src, dg.dst, dg.bytes.clone()));
                    }
                }
                self.log_event(
                    "frame_delivered",
                    json!({ "node": node_id, "peer": peer, "len": dg.bytes.len(), "adversarial": tool.is_some() }),
                );
                self.on_inner_packet(node_id, packet);
            }
            Err(err) => {
                if matches!(err, TunnelError::Replay(_)) {
                    self.frames.replay_rejected += 1;
                } else {
                    self.frames.blocked += 1;
                }
                if let Some(adv) = &mut self.adversary {
                    let r = &mut adv.report;
                    match (tool, &err) {
                        (Some(AdversaryTool::Replay), TunnelError::Replay(_)) => r.replays_rejected += 1,
                        (Some(AdversaryTool::Mutation), TunnelError::BadTag) => {
                            r.mutations_rejected_bad_tag += 1
                        }
                        (Some(AdversaryTool::Forgery), TunnelError::BadTag) => {
                            r.forgeries_rejected_bad_tag += 1
                        }
                        _ => {}
                    }
                }
                self.log_event(
                    "frame_rejected",
                    json!({
                        "node": node_id,
                        "from": self.name_of(dg.src),
                        "error": err,
                        "adversarial": tool.is_some(),
                    }),
                );
            }
        }
    }

    fn on_inner_packet(&mut self, node_id: &str, packet: InnerPacket) {
        let node = &self.nodes[node_id];
        if packet.dst == node.private {
            self.deliver_local(node_id, packet);
        } else if matches!(node.kind, NodeKind::VpnServer | NodeKind::Gateway) {
            self.route_and_send(node_id, packet);
        } else {
            self.packets.undeliverable += 1;
            self.log_event(
                "packet_misdirected",
                json!({ "node": node_id, "dst": packet.dst.to_string() }),
            );
        }
    }

    fn originate(&mut self, node_id: &str, packet: InnerPacket) {
        self.packets.originated += 1;
        *self.in_transit.entry(packet.to_bytes()).or_default() += 1;
        if self.adversary.is_some() {
            self.sent_payloads.push(packet.payload.clone());
        }
        self.log_event(
            "packet_sent",
            json!({
                "node": node_id,
                "src": packet.src.to_string(),
                "dst": packet.dst.to_string(),
                "len": packet.payload.len(),
            }),
        );
        self.route_and_send(node_id, packet);
    }

    fn route_and_send(&mut self, node_id: &str, packet: InnerPacket) {
        let device_tunnels = self.config.topology.device_tunnels;
        let node = &self.nodes[node_id];
        match node.kind {
            NodeKind::Gateway => {
                let local = self
                    .by_private
                    .get(&packet.dst)
                    .filter(|d| {
                        self.nodes[*d]
                            .device
                            .as_ref()
                            .is_some_and(|s| s.gateway == node_id)
                    })
                    .cloned();
                if let Some(dev) = local {
                    if device_tunnels {
                        self.send_via_tunnel(node_id, &dev, packet, true);
                    } else {
                        self.deliver_local(&dev, packet);
                    }
                    return;
                }
            }
            NodeKind::IotDevice if !device_tunnels => {
                let gw = node.device.as_ref().expect("device state").gateway.clone();
                self.route_and_send(&gw, packet);
                return;
            }
            _ => {}
        }
        match route_inner(&packet, &node.routes) {
            Ok(next) => {
                self.send_via_tunnel(node_id, &next, packet, true);
            }
            Err(err) => {
                self.packets.undeliverable += 1;
                self.log_event("packet_unroutable", json!({ "node": node_id, "error": err }));
            }
        }
    }

    /// Returns false and queues the packet when no tunnel to `next` exists yet.
    fn send_via_tunnel(&mut self, node_id: &str, next: &str, packet: InnerPacket, first_try: bool) -> bool {
        let dst = self.nodes[next].transport;
        let node = self.nodes.get_mut(node_id).expect("known node");
        let src = node.transport;
        let Some(tunnel) = node.tunnels.get_mut(next) else {
            node.outbox.push((next.to_string(), packet));
            if first_try {
                self.log_event("packet_queued", json!({ "node": node_id, "next_hop": next }));
            }
            return false;
        };
        match tunnel.encapsulate(&packet) {
            Ok(frame) => {
                self.send(src, dst, frame.encode(), Origin::Honest);
                true
            }
            Err(err) => {
                self.packets.undeliverable += 1;
                self.log_event("encapsulation_failed", json!({ "node": node_id, "error": err }));
                true
            }
        }
    }

    fn flush_outboxes(&mut self) {
        let ids: Vec<String> = self
            .nodes
            .iter()
            .filter(|(_, n)| n.outbox.iter().any(|(next, _)| n.tunnels.contains_key(next)))
            .map(|(id, _)| id.clone())
            .collect();
        for id in ids {
            let pending = std::mem::take(&mut self.nodes.get_mut(&id).expect("known").outbox);
            for (next, packet) in pending {
                self.send_via_tunnel(&id, &next, packet, false);
            }
        }
    }

    fn deliver_local(&mut self, node_id: &str, packet: InnerPacket) {
        self.packets.delivered += 1;
        match self.in_transit.get_mut(&packet.to_bytes()) {
            Some(n) if *n > 0 => *n -= 1,
            _ => self.packets.corrupted += 1,
        }
        self.log_event(
            "packet_delivered",
            json!({
                "node": node_id,
                "src": packet.src.to_string(),
                "len": packet.payload.len(),
            }),
        );
        let from_device = self
            .by_private
            .get(&packet.src)
            .is_some_and(|id| self.nodes[id].kind == NodeKind::IotDevice);
        let node = self.nodes.get_mut(node_id).expect("known node");
        let own = node.private;
        if let (Some(dev), false) = (&mut node.device, from_device) {
            let reply = dev.respond(&packet.payload);
            let state = dev.state();
            self.log_event("device_action", json!({ "node": node_id, "state": state }));
            self.originate(node_id, InnerPacket::new(own, packet.src, reply));
        }
    }

    fn adversary_action(&mut self, action: AdversaryAction) {
        self.log_event("adversary_action", json!({ "action": action }));
        let Some(mut adv) = self.adversary.take() else {
            return;
        };
        match action {
            AdversaryAction::SniffAll => adv.sniffing = true,
            AdversaryAction::ReplayFrame { index } => match adv.delivered_frames.get(index).cloned() {
                Some((src, dst, bytes)) => {
                    adv.report.replays_sent += 1;
                    self.adversary_send(&mut adv, src, dst, bytes, AdversaryTool::Replay);
                }
                None => adv.report.errors.push(format!(
                    "unknown frame index {index}: {} frames delivered so far",
                    adv.delivered_frames.len()
                )),
            },
            AdversaryAction::ReplayAll => {
                for (src, dst, bytes) in adv.delivered_frames.clone() {
                    adv.report.replays_sent += 1;
                    self.adversary_send(&mut adv, src, dst, bytes, AdversaryTool::Replay);
                }
            }
            AdversaryAction::InjectFrame { target, bytes } => {
                let dst = self.nodes[&target].transport;
                let bytes = hex::decode(bytes).expect("validated hex");
                adv.report.injections_sent += 1;
                self.adversary_send(&mut adv, ADVERSARY_TRANSPORT, dst, bytes, AdversaryTool::Inject);
            }
            AdversaryAction::MutateFrames { count } => {
                if adv.delivered_frames.is_empty() {
                    adv.report
                        .errors
                        .push("mutate_frames: no frames delivered yet".into());
                }
                for _ in 0..count {
                    if adv.delivered_frames.is_empty() {
                        break;
                    }
                    let i = self.adversary_rng.gen_range(0..adv.delivered_frames.len());
                    let (src, dst, mut bytes) = adv.delivered_frames[i].clone();
                    // sequence number, ciphertext and tag
                    let positions: Vec<usize> = (7..15).chain(FRAME_HEADER_LEN..bytes.len()).collect();
                    let bit = self.adversary_rng.gen_range(0..positions.len() * 8);
                    bytes[positions[bit / 8]] ^= 1 << (bit % 8);
                    adv.report.mutations_sent += 1;
                    self.adversary_send(&mut adv, src, dst, bytes, AdversaryTool::Mutation);
                }
            }
            AdversaryAction::ForgeFrames { target, count } => {
                let target_node = &self.nodes[&target];
                let (dst, dst_private) = (target_node.transport, target_node.private);
                let observed: Vec<([u8; 4], Ipv4Addr)> = adv
                    .delivered_frames
                    .iter()
                    .filter(|(_, d, _)| *d == dst)
                    .filter_map(|(s, _, b)| TunnelFrame::decode(b).ok().map(|f| (f.session_id, *s)))
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                for _ in 0..count {
                    let mut raw = [0u8; SESSION_KEYS_LEN];
                    self.adversary_rng.fill_bytes(&mut raw);
                    let mut keys = SessionKeys::from_bytes(&raw);
                    let mut src = ADVERSARY_TRANSPORT;
                    if !observed.is_empty() {
                        let (sid, s) = observed[self.adversary_rng.gen_range(0..observed.len())];
                        keys.session_id = sid;
                        src = s;
                    }
                    let mut forged =
                        establish_tunnel(&keys, Role::Initiator, Route::new(ADVERSARY_ID, &target));
                    let len = self.adversary_rng.gen_range(8..=64);
                    let mut payload = vec![0u8; len];
                    self.adversary_rng.fill_bytes(&mut payload);
                    let packet = InnerPacket::new(Ipv4Addr::new(10, 255, 0, 1), dst_private, payload);
                    let frame = forged.encapsulate(&packet).expect("small payload");
                    adv.report.forgeries_sent += 1;
                    self.adversary_send(&mut adv, src, dst, frame.encode(), AdversaryTool::Forgery);
                }
            }
            AdversaryAction::ImpersonateUser {
                username,
                password,
                mac,
            } => {
                let decision =
                    self.registry
                        .authenticate_credentials(&username, &password, mac.unwrap_or(adv.mac));
                adv.report.impersonations.push(LoginRecord {
                    epoch: self.epoch,
                    username: username.clone(),
                    decision,
                });
                self.log_event(
                    "login",
                    json!({ "user": username, "decision": decision, "adversarial": true }),
                );
            }
            AdversaryAction::SelfSignedHandshake { target, claimed_id } => {
                let fake_root = ecc::keygen(&self.curve, &mut self.adversary_rng);
                let key = ecc::keygen(&self.curve, &mut self.adversary_rng);
                let certificate = Certificate::issue(
                    &self.curve,
                    &fake_root,
                    &claimed_id,
                    SubjectKind::User,
                    key.public(),
                    self.epoch,
                )
                .expect("non-empty certificate body");
                let cfg = self.handshake_config(
                    Identity {
                        keypair: key,
                        certificate,
                    },
                    &target,
                );
                let mut state = HandshakeState::initiator(cfg, self.adversary_rng.gen());
                let first = state.start(self.epoch).expect("fresh initiator");
                let dst = self.nodes[&target].transport;
                let idx = self.new_track(ADVERSARY_ID, &target, (ADVERSARY_TRANSPORT, dst));
                adv.attempts.push(idx);
                adv.report.self_signed_attempts.push(SelfSignedAttempt {
                    epoch: self.epoch,
                    target: target.clone(),
                    claimed_id,
                    outcome: HandshakeOutcome::Incomplete,
                    error: None,
                });
                self.nodes
                    .get_mut(ADVERSARY_ID)
                    .expect("adversary node")
                    .slots
                    .insert(
                        dst,
                        Slot {
                            state,
                            record: Some(idx),
                        },
                    );
                self.adversary_send(
                    &mut adv,
                    ADVERSARY_TRANSPORT,
                    dst,
                    encode_flight(&first),
                    AdversaryTool::Handshake,
                );
            }
        }
        self.adversary = Some(adv);
    }

    fn adversary_send(
        &mut self,
        adv: &mut AdversaryState,
        src: Ipv4Addr,
        dst: Ipv4Addr,
        bytes: Vec<u8>,
        tool: AdversaryTool,
    ) {
        // `send` looks at self.adversary for sniffing; adversarial traffic is
        // never captured, so the temporary take is harmless.
        let _ = adv;
        self.send(src, dst, bytes, Origin::Adversary(tool));
    }

    /// Wire bytes of the completed handshake between two nodes, with the
    /// key-size counterfactual.
    pub fn measure_handshake_bytes(
        &self,
        initiator: &str,
        responder: &str,
    ) -> Result<HandshakeByteProfile, NetsimError> {
        let none = || NetsimError::NoHandshake {
            initiator: initiator.to_string(),
            responder: responder.to_string(),
        };
        let track = self
            .handshakes
            .iter()
            .find(|t| {
                t.record.initiator == initiator
                    && t.record.responder == responder
                    && t.keys.iter().all(Option::is_some)
            })
            .ok_or_else(none)?;
        let flights = complete_flights(track).ok_or_else(none)?;
        handshake_byte_profile(&self.curve, &flights).map_err(|_| none())
    }

    fn finish(&mut self, epochs_run: u64, quiescent: bool) -> SimReport {
        for dg in self.queue.values() {
            if dg.is_frame() {
                self.frames.dropped += 1;
            }
        }
        let stranded: usize = self.nodes.values().map(|n| n.outbox.len()).sum();
        self.packets.undeliverable += stranded as u64;

        for track in &mut self.handshakes {
            let r = &mut track.record;
            if let [Some(a), Some(b)] = &track.keys {
                r.keys_match = Some(a == b);
            }
            r.outcome = if track.keys[0].is_some() {
                HandshakeOutcome::Established
            } else if r.error.is_some() || r.responder_error.is_some() {
                HandshakeOutcome::Failed
            } else {
                HandshakeOutcome::Incomplete
            };
            for (i, f) in track.flights.iter().enumerate() {
                r.flight_bytes[i] = f.as_ref().map_or(0, Vec::len);
            }
            r.total_bytes = r.flight_bytes.iter().sum();
        }
        let handshake_bytes = self
            .handshakes
            .iter()
            .filter(|t| t.record.initiator != ADVERSARY_ID)
            .find_map(|t| {
                (t.record.outcome == HandshakeOutcome::Established)
                    .then(|| complete_flights(t))
                    .flatten()
            })
            .and_then(|f| handshake_byte_profile(&self.curve, &f).ok());

        let adversary = self.adversary.as_mut().map(|adv| {
            for (attempt, &idx) in adv.report.self_signed_attempts.iter_mut().zip(&adv.attempts) {
                let r = &self.handshakes[idx].record;
                attempt.outcome = r.outcome;
                attempt.error = r.error.clone();
            }
            adv.report.payloads_checked = self
                .sent_payloads
                .iter()
                .filter(|p| p.len() >= PLAINTEXT_WINDOW)
                .count() as u64;
            adv.report.plaintext_recovered = count_recovered_payloads(&self.sent_payloads, &adv.capture);
            adv.report.clone()
        });

        let mut nodes = NodeCounts::default();
        for n in self.nodes.values() {
            match n.kind {
                NodeKind::VpnServer => nodes.vpn_server += 1,
                NodeKind::Gateway => nodes.gateways += 1,
                NodeKind::IotDevice => nodes.iot_devices += 1,
                NodeKind::User => nodes.users += 1,
                NodeKind::Adversary => nodes.adversary += 1,
            }
        }
        let devices = self
            .nodes
            .values()
            .filter_map(|n| {
                n.device.as_ref().map(|d| DeviceReport {
                    id: n.id.clone(),
                    gateway: d.gateway.clone(),
                    behavior: d.behavior,
                    requests_handled: d.requests,
                    state: d.state(),
                })
            })
            .collect();

        let adv = adversary.as_ref();
        let adv_frames = adv.map_or(0, |a| a.frames_accepted);
        let cia = CiaVerdict {
            confidentiality: adv.map_or(0, |a| a.plaintext_recovered) == 0,
            integrity: self.packets.corrupted == 0 && adv_frames == 0,
            authenticity: adv_frames == 0
                && adv.map_or(0, |a| a.handshakes_established) == 0
                && adv.is_none_or(|a| {
                    a.impersonations
                        .iter()
                        .all(|l| l.decision != AuthDecision::Accepted)
                }),
        };
        let report = SimReport {
            schema: SCHEMA_VERSION,
            scenario: self.config.name.clone(),
            seed: self.seed,
            curve: self.curve.name().to_string(),
            epochs_run,
            quiescent,
            nodes,
            logins: self.logins.clone(),
            handshakes: self.handshakes.iter().map(|t| t.record.clone()).collect(),
            frames: self.frames.clone(),
            packets: self.packets.clone(),
            devices,
            adversary,
            handshake_bytes,
            cia,
            counts_consistent: self.frames.consistent(),
            security_violation: !cia.all(),
        };
        self.log_event(
            "run_finished",
            json!({ "quiescent": quiescent, "security_violation": report.security_violation }),
        );
        report
    }
}

fn complete_flights(track: &HandshakeTrack) -> Option<[Vec<u8>; 6]> {
    let mut out: [Vec<u8>; 6] = Default::default();
    for (o, f) in out.iter_mut().zip(&track.flights) {
        *o = f.clone()?;
    }
    Some(out)
}
