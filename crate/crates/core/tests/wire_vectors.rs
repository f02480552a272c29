mod common;

use common::{oracle_frame, oracle_message, vector_path};
use iotsec::ecc::Curve;
use iotsec::handshake::{
    decode_flight, derive_session_keys, encode_flight, flight_number, provision_pair, run_loopback,
    AbortReason, HandshakeConfig, HandshakeMessage, LoopbackParty, Role, SessionKeys, LOOPBACK_SERVER_ID,
};
use iotsec::hash::sha256;
use iotsec::tunnel::{establish_tunnel, InnerPacket, Route, TunnelFrame};
use serde_json::{json, Value};
use std::net::Ipv4Addr;

fn vector_keys() -> SessionKeys {
    derive_session_keys(&[0x07; 32], &[0x01; 32], &[0x02; 32])
}

fn frame_vectors() -> Value {
    let keys = vector_keys();
    let mut init = establish_tunnel(&keys, Role::Initiator, Route::new("alice", "vpn-server"));
    let mut resp = establish_tunnel(&keys, Role::Responder, Route::new("vpn-server", "alice"));
    let user = Ipv4Addr::new(10, 255, 0, 1);
    let lamp = Ipv4Addr::new(10, 1, 0, 2);
    let long: Vec<u8> = (0..1200u32).map(|i| (i * 7 % 251) as u8).collect();
    let cases: Vec<(&str, Role, Ipv4Addr, Ipv4Addr, Vec<u8>)> = vec![
        (
            "initiator_toggle",
            Role::Initiator,
            user,
            lamp,
            b"toggle".to_vec(),
        ),
        ("initiator_empty_payload", Role::Initiator, user, lamp, vec![]),
        ("initiator_max_payload", Role::Initiator, user, lamp, long),
        (
            "responder_reply",
            Role::Responder,
            lamp,
            user,
            b"switch=on".to_vec(),
        ),
        (
            "responder_two_blocks",
            Role::Responder,
            lamp,
            user,
            vec![0xaa; 57],
        ),
    ];
    let frames: Vec<Value> = cases
        .into_iter()
        .map(|(name, role, src, dst, payload)| {
            let session = if role == Role::Initiator {
                &mut init
            } else {
                &mut resp
            };
            let frame = session
                .encapsulate(&InnerPacket::new(src, dst, payload.clone()))
                .unwrap();
            json!({
                "name": name,
                "role": role,
                "seq": frame.seq,
                "src": src.to_string(),
                "dst": dst.to_string(),
                "payload": hex::encode(&payload),
                "frame": hex::encode(frame.encode()),
            })
        })
        .collect();
    json!({ "session_keys": hex::encode(keys.to_bytes()), "frames": frames })
}

fn handshake_vectors() -> Value {
    let messages = [
        (
            "client_hello_no_cookie",
            HandshakeMessage::ClientHello {
                client_nonce: [0x11; 32],
                cookie: None,
            },
        ),
        (
            "client_hello_with_cookie",
            HandshakeMessage::ClientHello {
                client_nonce: [0x11; 32],
                cookie: Some([0xc0; 16]),
            },
        ),
        (
            "hello_verify_request",
            HandshakeMessage::HelloVerifyRequest { cookie: [0xc0; 16] },
        ),
        (
            "server_hello",
            HandshakeMessage::ServerHello {
                server_nonce: [0x22; 32],
            },
        ),
        (
            "finished",
            HandshakeMessage::Finished {
                verify_mac: [0x33; 32],
            },
        ),
        (
            "abort_bad_certificate",
            HandshakeMessage::Abort {
                reason: AbortReason::BadCertificate,
            },
        ),
        (
            "abort_bad_finished",
            HandshakeMessage::Abort {
                reason: AbortReason::BadFinished,
            },
        ),
        (
            "key_exchange",
            HandshakeMessage::KeyExchange {
                ephemeral_public: vec![0x04, 5, 1],
                signature: vec![0x04, 6, 3, 9],
            },
        ),
    ];
    let messages: Vec<Value> = messages
        .iter()
        .map(|(name, m)| json!({ "name": name, "message": hex::encode(m.encode()) }))
        .collect();

    let curve = Curve::t17();
    let (registry, server, client) = provision_pair(curve.clone(), 1);
    let outcome = run_loopback(
        &registry,
        LoopbackParty::new(
            HandshakeConfig::new(curve.clone(), client).expect_peer(LOOPBACK_SERVER_ID),
            sha256(&[b"vector/initiator"]),
        ),
        LoopbackParty::new(
            HandshakeConfig::new(curve, server),
            sha256(&[b"vector/responder"]),
        ),
        |_, _, _| {},
    );
    assert!(outcome.established());
    let flights: Vec<Value> = outcome
        .flights
        .iter()
        .map(|f| json!({ "flight": f.flight, "messages": f.messages, "bytes": hex::encode(&f.bytes) }))
        .collect();
    json!({
        "curve": "T17",
        "messages": messages,
        "flights": flights,
        "session_keys": hex::encode(outcome.initiator_keys().unwrap().to_bytes()),
    })
}

fn load(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(vector_path(name)).unwrap()).unwrap()
}

fn unhex(v: &Value) -> Vec<u8> {
    hex::decode(v.as_str().unwrap()).unwrap()
}

#[test]
#[ignore = "rewrites the shipped vector files"]
fn regenerate_vectors() {
    for (name, v) in [
        ("tunnel_frames.json", frame_vectors()),
        ("handshake_messages.json", handshake_vectors()),
    ] {
        std::fs::write(
            vector_path(name),
            serde_json::to_string_pretty(&v).unwrap() + "\n",
        )
        .unwrap();
    }
}

#[test]
fn shipped_vectors_are_current() {
    assert_eq!(load("tunnel_frames.json"), frame_vectors());
    assert_eq!(load("handshake_messages.json"), handshake_vectors());
}

#[test]
fn frame_vectors_match_wire_oracle() {
    let v = load("tunnel_frames.json");
    let keys = SessionKeys::from_bytes(&unhex(&v["session_keys"]).try_into().unwrap());
    for f in v["frames"].as_array().unwrap() {
        let (key, mac) = match f["role"].as_str().unwrap() {
            "initiator" => (keys.initiator_write_key, keys.initiator_mac_key),
            _ => (keys.responder_write_key, keys.responder_mac_key),
        };
        let ip = |k: &str| f[k].as_str().unwrap().parse::<Ipv4Addr>().unwrap().octets();
        let expected = oracle_frame(
            &key,
            &mac,
            keys.session_id,
            f["seq"].as_u64().unwrap(),
            ip("src"),
            ip("dst"),
            &unhex(&f["payload"]),
        );
        assert_eq!(unhex(&f["frame"]), expected, "{}", f["name"]);
    }
}

#[test]
fn frame_vectors_round_trip_and_open() {
    let v = load("tunnel_frames.json");
    let keys = SessionKeys::from_bytes(&unhex(&v["session_keys"]).try_into().unwrap());
    let mut at_responder = establish_tunnel(&keys, Role::Responder, Route::new("r", "i"));
    let mut at_initiator = establish_tunnel(&keys, Role::Initiator, Route::new("i", "r"));
    for f in v["frames"].as_array().unwrap() {
        let bytes = unhex(&f["frame"]);
        let frame = TunnelFrame::decode(&bytes).unwrap();
        assert_eq!(frame.encode(), bytes);
        let receiver = if f["role"] == "initiator" {
            &mut at_responder
        } else {
            &mut at_initiator
        };
        let packet = receiver.decapsulate(&frame).unwrap();
        assert_eq!(packet.payload, unhex(&f["payload"]));
    }
}

#[test]
fn handshake_vectors_round_trip() {
    let v = load("handshake_messages.json");
    for m in v["messages"].as_array().unwrap() {
        let bytes = unhex(&m["message"]);
        assert_eq!(
            HandshakeMessage::decode(&bytes).unwrap().encode(),
            bytes,
            "{}",
            m["name"]
        );
    }
    let flights = v["flights"].as_array().unwrap();
    assert_eq!(flights.len(), 6);
    for (i, f) in flights.iter().enumerate() {
        let bytes = unhex(&f["bytes"]);
        let msgs = decode_flight(&bytes).unwrap();
        assert_eq!(encode_flight(&msgs), bytes);
        assert_eq!(flight_number(&msgs), Some(i as u8 + 1));
    }
}

#[test]
fn handshake_layout_matches_oracle() {
    let v = load("handshake_messages.json");
    let by_name = |n: &str| {
        unhex(
            &v["messages"]
                .as_array()
                .unwrap()
                .iter()
                .find(|m| m["name"] == n)
                .unwrap()["message"],
        )
    };
    let nonce = [0x11u8; 32];
    assert_eq!(
        by_name("client_hello_no_cookie"),
        oracle_message(0x01, &[&nonce[..], &[0]].concat())
    );
    assert_eq!(
        by_name("client_hello_with_cookie"),
        oracle_message(0x01, &[&nonce[..], &[16], &[0xc0; 16]].concat())
    );
    assert_eq!(by_name("hello_verify_request"), oracle_message(0x02, &[0xc0; 16]));
    assert_eq!(by_name("server_hello"), oracle_message(0x03, &[0x22; 32]));
    assert_eq!(by_name("finished"), oracle_message(0x07, &[0x33; 32]));
    assert_eq!(
        by_name("key_exchange"),
        oracle_message(0x05, &[0, 3, 0x04, 5, 1, 0, 4, 0x04, 6, 3, 9])
    );
    assert_eq!(by_name("abort_bad_certificate").len(), 4);
}
