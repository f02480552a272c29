//! Scenario files: JSON documents with `"schema": 1`.

use crate::ecc::Curve;
use crate::registry::MacAddress;
use crate::tunnel::MAX_PAYLOAD;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const ADVERSARY_ID: &str = "adversary";
const MAX_NODES_PER_GROUP: usize = 250;

/// A config problem, located by a dotted path into the document.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub curve: String,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: u64,
    pub topology: Topology,
    #[serde(default)]
    pub link: LinkConfig,
    #[serde(default)]
    pub handshake: HandshakeSettings,
    #[serde(default)]
    pub adversary: Option<AdversaryConfig>,
    #[serde(default)]
    pub traffic: Vec<TrafficItem>,
    #[serde(default)]
    pub random_traffic: Vec<RandomTraffic>,
}

fn default_max_epochs() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default = "default_server_id")]
    pub server_id: String,
    #[serde(default)]
    pub gateways: Vec<GatewayConfig>,
    #[serde(default)]
    pub devices: Vec<DeviceConfig>,
    #[serde(default)]
    pub users: Vec<UserConfig>,
    #[serde(default)]
    pub tunnel_mode: TunnelMode,
    /// Devices run their own handshake and tunnel to their gateway instead
    /// of receiving plaintext over the local network.
    #[serde(default)]
    pub device_tunnels: bool,
}

fn default_server_id() -> String {
    "vpn-server".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub id: String,
    pub gateway: String,
    #[serde(default)]
    pub behavior: Behavior,
}

/// Scripted request handling of an IoT device.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Replies with a reading that changes with each request.
    Temperature,
    /// `toggle` flips the state, anything else reports it.
    Switch,
    #[default]
    Echo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserConfig {
    pub username: String,
    pub password: String,
    pub mac: MacAddress,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunnelMode {
    /// Users tunnel to the server only; the server forwards to gateways.
    #[default]
    ServerMediated,
    /// Users also tunnel straight to every gateway.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    #[serde(default = "one")]
    pub delay: u64,
    #[serde(default)]
    pub loss_rate: f64,
    #[serde(default)]
    pub reorder_rate: f64,
    #[serde(default)]
    pub duplicate_rate: f64,
}

fn one() -> u64 {
    1
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            delay: 1,
            loss_rate: 0.0,
            reorder_rate: 0.0,
            duplicate_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandshakeSettings {
    #[serde(default = "default_timeout")]
    pub timeout_epochs: u64,
    #[serde(default = "default_retransmits")]
    pub max_retransmits: u32,
}

fn default_timeout() -> u64 {
    4
}

fn default_retransmits() -> u32 {
    crate::handshake::DEFAULT_MAX_RETRANSMITS
}

impl Default for HandshakeSettings {
    fn default() -> Self {
        HandshakeSettings {
            timeout_epochs: default_timeout(),
            max_retransmits: default_retransmits(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryConfig {
    #[serde(default = "default_adversary_mac")]
    pub mac: MacAddress,
    #[serde(default)]
    pub actions: Vec<ScheduledAction>,
}

fn default_adversary_mac() -> MacAddress {
    MacAddress([0x02, 0xad, 0xbe, 0xef, 0x00, 0x01])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledAction {
    pub at: u64,
    pub action: AdversaryAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversaryAction {
    /// Capture every datagram on every link from now on.
    SniffAll,
    /// Resend the `index`-th tunnel frame delivered so far.
    ReplayFrame { index: usize },
    /// Resend every tunnel frame delivered so far.
    ReplayAll,
    /// Send raw bytes to a node.
    InjectFrame { target: String, bytes: String },
    /// Resend `count` delivered frames, each with one bit flipped in the
    /// sequence number, ciphertext or tag.
    MutateFrames { count: u32 },
    /// Send `count` frames built under random keys, carrying session ids
    /// observed towards `target`.
    ForgeFrames { target: String, count: u32 },
    /// Log in with stolen credentials from the adversary's own machine.
    ImpersonateUser {
        username: String,
        password: String,
        #[serde(default)]
        mac: Option<MacAddress>,
    },
    /// Run a handshake against `target` with a certificate the adversary
    /// signed itself.
    SelfSignedHandshake { target: String, claimed_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficItem {
    pub at: u64,
    pub from: String,
    pub to: String,
    pub payload: String,
}

/// `count` random payloads of `min_len..=max_len` bytes, `per_epoch` at a
/// time starting at `start`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomTraffic {
    pub from: String,
    pub to: String,
    pub count: u32,
    #[serde(default)]
    pub start: u64,
    #[serde(default = "one_u32")]
    pub per_epoch: u32,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn one_u32() -> u32 {
    1
}

fn default_min_len() -> usize {
    8
}

fn default_max_len() -> usize {
    64
}

impl RandomTraffic {
    pub fn last_epoch(&self) -> u64 {
        let per = u64::from(self.per_epoch.max(1));
        self.start + u64::from(self.count).div_ceil(per)
    }
}

fn check_id(id: &str, path: &str) -> Result<(), ConfigError> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && id != "-"
        && id != ADVERSARY_ID
        && id.chars().all(|c| c.is_ascii_graphic());
    if ok {
        Ok(())
    } else {
        Err(ConfigError::new(path, format!("invalid node id {id:?}")))
    }
}

fn check_rate(v: f64, path: &str) -> Result<(), ConfigError> {
    if v.is_finite() && (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(ConfigError::new(path, format!("{v} is not within [0, 1]")))
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::new(
                if path == "." { "$".into() } else { path },
                e.into_inner().to_string(),
            )
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every node id except the adversary's.
    pub fn node_ids(&self) -> BTreeSet<&str> {
        let t = &self.topology;
        std::iter::once(t.server_id.as_str())
            .chain(t.gateways.iter().map(|g| g.id.as_str()))
            .chain(t.devices.iter().map(|d| d.id.as_str()))
            .chain(t.users.iter().map(|u| u.username.as_str()))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema != SCHEMA_VERSION {
            return Err(ConfigError::new(
                "schema",
                format!("unsupported schema {}, expected {SCHEMA_VERSION}", self.schema),
            ));
        }
        Curve::by_name(&self.curve).map_err(|e| ConfigError::new("curve", e.to_string()))?;
        if self.max_epochs == 0 || self.max_epochs > 1_000_000 {
            return Err(ConfigError::new("max_epochs", "must be within 1..=1000000"));
        }

        let t = &self.topology;
        let mut seen = BTreeSet::new();
        let mut claim = |id: &str, path: String| -> Result<(), ConfigError> {
            check_id(id, &path)?;
            if !seen.insert(id.to_string()) {
                return Err(ConfigError::new(path, format!("duplicate node id {id:?}")));
            }
            Ok(())
        };
        claim(&t.server_id, "topology.server_id".into())?;
        for (i, g) in t.gateways.iter().enumerate() {
            claim(&g.id, format!("topology.gateways[{i}].id"))?;
        }
        for (i, d) in t.devices.iter().enumerate() {
            claim(&d.id, format!("topology.devices[{i}].id"))?;
        }
        for (i, u) in t.users.iter().enumerate() {
            claim(&u.username, format!("topology.users[{i}].username"))?;
        }
        if t.gateways.len() > MAX_NODES_PER_GROUP {
            return Err(ConfigError::new("topology.gateways", "too many gateways"));
        }
        if t.users.len() > MAX_NODES_PER_GROUP {
            return Err(ConfigError::new("topology.users", "too many users"));
        }
        for (i, d) in t.devices.iter().enumerate() {
            if !t.gateways.iter().any(|g| g.id == d.gateway) {
                return Err(ConfigError::new(
                    format!("topology.devices[{i}].gateway"),
                    format!("unknown gateway {:?}", d.gateway),
                ));
            }
        }
        for g in &t.gateways {
            if t.devices.iter().filter(|d| d.gateway == g.id).count() > MAX_NODES_PER_GROUP {
                return Err(ConfigError::new(
                    "topology.devices",
                    format!("too many devices behind {}", g.id),
                ));
            }
        }

        if self.link.delay == 0 || self.link.delay > 100 {
            return Err(ConfigError::new("link.delay", "must be within 1..=100"));
        }
        check_rate(self.link.loss_rate, "link.loss_rate")?;
        check_rate(self.link.reorder_rate, "link.reorder_rate")?;
        check_rate(self.link.duplicate_rate, "link.duplicate_rate")?;
        if self.handshake.timeout_epochs == 0 {
            return Err(ConfigError::new("handshake.timeout_epochs", "must be positive"));
        }

        let ids = self.node_ids();
        let node = |id: &str, path: String| -> Result<(), ConfigError> {
            if ids.contains(id) {
                Ok(())
            } else {
                Err(ConfigError::new(path, format!("unknown node {id:?}")))
            }
        };
        for (i, item) in self.traffic.iter().enumerate() {
            node(&item.from, format!("traffic[{i}].from"))?;
            node(&item.to, format!("traffic[{i}].to"))?;
            if item.from == item.to {
                return Err(ConfigError::new(
                    format!("traffic[{i}].to"),
                    "sender and receiver are the same node",
                ));
            }
            if item.payload.len() > MAX_PAYLOAD {
                return Err(ConfigError::new(
                    format!("traffic[{i}].payload"),
                    "payload too large",
                ));
            }
        }
        for (i, r) in self.random_traffic.iter().enumerate() {
            node(&r.from, format!("random_traffic[{i}].from"))?;
            node(&r.to, format!("random_traffic[{i}].to"))?;
            if r.from == r.to {
                return Err(ConfigError::new(
                    format!("random_traffic[{i}].to"),
                    "sender and receiver are the same node",
                ));
            }
            if r.min_len > r.max_len || r.max_len > MAX_PAYLOAD {
                return Err(ConfigError::new(
                    format!("random_traffic[{i}].max_len"),
                    format!("need min_len <= max_len <= {MAX_PAYLOAD}"),
                ));
            }
            if r.per_epoch == 0 {
                return Err(ConfigError::new(
                    format!("random_traffic[{i}].per_epoch"),
                    "must be positive",
                ));
            }
            if r.count > 100_000 {
                return Err(ConfigError::new(
                    format!("random_traffic[{i}].count"),
                    "at most 100000",
                ));
            }
        }
        if let Some(adv) = &self.adversary {
            for (i, a) in adv.actions.iter().enumerate() {
                let path = |f: &str| format!("adversary.actions[{i}].action.{f}");
                match &a.action {
                    AdversaryAction::InjectFrame { target, bytes } => {
                        node(target, path("target"))?;
                        hex::decode(bytes).map_err(|e| ConfigError::new(path("bytes"), e.to_string()))?;
                    }
                    AdversaryAction::ForgeFrames { target, .. } => node(target, path("target"))?,
                    AdversaryAction::SelfSignedHandshake { target, claimed_id } => {
                        node(target, path("target"))?;
                        if claimed_id.is_empty() || claimed_id.len() > 64 {
                            return Err(ConfigError::new(path("claimed_id"), "invalid subject id"));
                        }
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Last epoch at which the config schedules anything.
    pub fn last_scheduled_epoch(&self) -> u64 {
        let traffic = self.traffic.iter().map(|t| t.at);
        let random = self.random_traffic.iter().map(RandomTraffic::last_epoch);
        let adv = self.adversary.iter().flat_map(|a| a.actions.iter().map(|s| s.at));
        traffic.chain(random).chain(adv).max().unwrap_or(0)
    }
}
