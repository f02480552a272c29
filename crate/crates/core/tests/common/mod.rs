#![allow(dead_code)]

use hmac::{Hmac, Mac};
use iotsec::ecc::{Curve, Point};
use iotsec::netsim::ScenarioConfig;
use num_bigint::BigUint;
use sha2::{Digest, Sha256};
use std::path::PathBuf;

/// Affine point on the 17-element test curve, `None` for the identity.
pub type SmallPoint = Option<(i64, i64)>;

/// Group law for y^2 = x^3 + 2x + 2 over GF(17) from the textbook chord and
/// tangent formulas, with inverses found by exhaustive search.
pub struct T17Oracle {
    pub points: Vec<SmallPoint>,
}

pub const T17_P: i64 = 17;
pub const T17_A: i64 = 2;
pub const T17_B: i64 = 2;

fn md(x: i64) -> i64 {
    x.rem_euclid(T17_P)
}

fn inv(x: i64) -> i64 {
    (1..T17_P).find(|z| md(x * z) == 1).expect("nonzero element")
}

impl T17Oracle {
    pub fn new() -> Self {
        let mut points = vec![None];
        for x in 0..T17_P {
            for y in 0..T17_P {
                if md(y * y) == md(x * x * x + T17_A * x + T17_B) {
                    points.push(Some((x, y)));
                }
            }
        }
        T17Oracle { points }
    }

    pub fn add(&self, p: SmallPoint, q: SmallPoint) -> SmallPoint {
        let (Some((x1, y1)), Some((x2, y2))) = (p, q) else {
            return p.or(q);
        };
        if x1 == x2 && md(y1 + y2) == 0 {
            return None;
        }
        let l = if x1 == x2 {
            md((3 * x1 * x1 + T17_A) * inv(2 * y1))
        } else {
            md((y2 - y1) * inv(x2 - x1))
        };
        let x3 = md(l * l - x1 - x2);
        let y3 = md(l * (x1 - x3) - y1);
        Some((x3, y3))
    }

    pub fn mul(&self, k: u64, p: SmallPoint) -> SmallPoint {
        (0..k).fold(None, |acc, _| self.add(acc, p))
    }
}

pub fn to_point(p: SmallPoint) -> Point {
    match p {
        None => Point::Identity,
        Some((x, y)) => Point::new(x as u64, y as u64),
    }
}

pub fn from_point(p: &Point) -> SmallPoint {
    let small = |v: &BigUint| i64::try_from(v.clone()).expect("small coordinate");
    match p {
        Point::Identity => None,
        _ => Some((small(p.x().unwrap()), small(p.y().unwrap()))),
    }
}

pub fn t17() -> Curve {
    Curve::t17()
}

/// Frame bytes computed straight from the wire definition: keystream blocks
/// `SHA-256(key ‖ seq ‖ counter)` XORed over `src ‖ dst ‖ payload`, then
/// `HMAC-SHA-256(mac_key, header ‖ ciphertext)`.
pub fn oracle_frame(
    write_key: &[u8; 32],
    mac_key: &[u8; 32],
    session_id: [u8; 4],
    seq: u64,
    src: [u8; 4],
    dst: [u8; 4],
    payload: &[u8],
) -> Vec<u8> {
    let mut body = [&src[..], &dst[..], payload].concat();
    for (i, chunk) in body.chunks_mut(32).enumerate() {
        let mut h = Sha256::new();
        h.update(write_key);
        h.update(seq.to_be_bytes());
        h.update((i as u32).to_be_bytes());
        let block = h.finalize();
        for (b, k) in chunk.iter_mut().zip(block.iter()) {
            *b ^= k;
        }
    }
    let mut frame = vec![0x56, 0x54, 0x01];
    frame.extend(session_id);
    frame.extend(seq.to_be_bytes());
    frame.extend((body.len() as u16).to_be_bytes());
    frame.extend(&body);
    let mut mac = Hmac::<Sha256>::new_from_slice(mac_key).unwrap();
    mac.update(&frame);
    frame.extend(mac.finalize().into_bytes());
    frame
}

/// Handshake message framing: one tag byte, a big-endian u16 body length,
/// then the body.
pub fn oracle_message(tag: u8, body: &[u8]) -> Vec<u8> {
    let mut out = vec![tag];
    out.extend((body.len() as u16).to_be_bytes());
    out.extend(body);
    out
}

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

pub fn scenario(name: &str) -> ScenarioConfig {
    ScenarioConfig::load(scenario_dir().join(format!("{name}.json"))).expect("shipped scenario loads")
}

pub const SHIPPED: [&str; 7] = [
    "honest",
    "direct",
    "impersonation",
    "self_signed",
    "replay",
    "lossy",
    "eavesdrop",
];

pub fn seeds() -> Vec<u64> {
    let text = std::fs::read_to_string(scenario_dir().join("seeds.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["seeds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s.as_u64().unwrap())
        .collect()
}

pub fn vector_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/vectors")
        .join(name)
}
