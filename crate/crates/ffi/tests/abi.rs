use iotsec_ffi::*;
use std::ffi::{CStr, CString};
use std::ptr;

fn pair() -> (*mut IotsecTunnel, *mut IotsecTunnel) {
    let mut keys = [0u8; IOTSEC_SESSION_KEYS_LEN];
    let mut a = ptr::null_mut();
    let mut b = ptr::null_mut();
    unsafe {
        assert_eq!(
            iotsec_demo_session_keys(3, keys.as_mut_ptr(), keys.len()),
            IotsecStatus::Ok
        );
        assert_eq!(
            iotsec_tunnel_new(keys.as_ptr(), keys.len(), IotsecRole::Initiator, &mut a),
            IotsecStatus::Ok
        );
        assert_eq!(
            iotsec_tunnel_new(keys.as_ptr(), keys.len(), IotsecRole::Responder, &mut b),
            IotsecStatus::Ok
        );
    }
    (a, b)
}

fn encap(t: *mut IotsecTunnel, payload: &[u8]) -> Vec<u8> {
    let mut frame = vec![0u8; IOTSEC_MAX_FRAME_LEN];
    let mut len = 0;
    let status = unsafe {
        iotsec_tunnel_encapsulate(
            t,
            0x0aff_0001,
            0x0a01_0002,
            payload.as_ptr(),
            payload.len(),
            frame.as_mut_ptr(),
            frame.len(),
            &mut len,
        )
    };
    assert_eq!(status, IotsecStatus::Ok);
    frame.truncate(len);
    frame
}

fn decap(t: *mut IotsecTunnel, frame: &[u8]) -> (IotsecStatus, Vec<u8>, u32) {
    let mut out = vec![0u8; IOTSEC_MAX_PAYLOAD];
    let (mut len, mut src, mut dst) = (0, 0, 0);
    let status = unsafe {
        iotsec_tunnel_decapsulate(
            t,
            frame.as_ptr(),
            frame.len(),
            out.as_mut_ptr(),
            out.len(),
            &mut len,
            &mut src,
            &mut dst,
        )
    };
    out.truncate(len);
    (status, out, src)
}

#[test]
fn tunnel_round_trip_and_rejections() {
    let (a, b) = pair();
    let frame = encap(a, b"toggle");
    let (status, payload, src) = decap(b, &frame);
    assert_eq!(status, IotsecStatus::Ok);
    assert_eq!(payload, b"toggle");
    assert_eq!(src, 0x0aff_0001);
    assert_eq!(decap(b, &frame).0, IotsecStatus::Replay);

    let mut bad = encap(a, b"status");
    *bad.last_mut().unwrap() ^= 1;
    assert_eq!(decap(b, &bad).0, IotsecStatus::BadTag);
    let msg = unsafe { CStr::from_ptr(iotsec_last_error()) }
        .to_str()
        .unwrap()
        .to_string();
    assert!(!msg.is_empty());
    assert_eq!(decap(b, &bad[..10]).0, IotsecStatus::MalformedFrame);

    // a reply travels the other way
    let reply = encap(b, b"switch=on");
    assert_eq!(decap(a, &reply).1, b"switch=on");
    unsafe {
        iotsec_tunnel_free(a);
        iotsec_tunnel_free(b);
    }
}

#[test]
fn oversize_and_short_buffers() {
    let (a, b) = pair();
    let big = vec![0u8; IOTSEC_MAX_PAYLOAD + 1];
    let mut frame = vec![0u8; IOTSEC_MAX_FRAME_LEN + 8];
    let mut len = 0;
    unsafe {
        let s = iotsec_tunnel_encapsulate(
            a,
            1,
            2,
            big.as_ptr(),
            big.len(),
            frame.as_mut_ptr(),
            frame.len(),
            &mut len,
        );
        assert_eq!(s, IotsecStatus::PayloadTooLarge);
        let s = iotsec_tunnel_encapsulate(a, 1, 2, big.as_ptr(), 100, frame.as_mut_ptr(), 10, &mut len);
        assert_eq!(s, IotsecStatus::BufferTooSmall);
        assert_eq!(len, 17 + 8 + 100 + 32);
        let short = [0u8; 4];
        let mut out = ptr::null_mut();
        assert_eq!(
            iotsec_tunnel_new(short.as_ptr(), short.len(), IotsecRole::Initiator, &mut out),
            IotsecStatus::InvalidArgument
        );
        iotsec_tunnel_free(a);
        iotsec_tunnel_free(b);
    }
}

#[test]
fn scenario_runs_through_abi() {
    let json = CString::new(include_str!("../../core/scenarios/impersonation.json")).unwrap();
    let mut report = ptr::null_mut();
    let mut log = ptr::null_mut();
    let mut violation = true;
    unsafe {
        assert_eq!(
            iotsec_run_scenario(json.as_ptr(), 1, &mut report, &mut log, &mut violation),
            IotsecStatus::Ok
        );
        assert!(!violation);
        let text = CStr::from_ptr(report).to_str().unwrap();
        assert!(text.contains("\"mac_mismatch\""));
        assert!(CStr::from_ptr(log).to_str().unwrap().lines().count() > 10);
        iotsec_string_free(report);
        iotsec_string_free(log);

        let broken = CString::new(
            r#"{"schema": 1, "curve": "T17", "topology": {"devices": [{"id": "d", "gateway": "nope"}]}}"#,
        )
        .unwrap();
        let s = iotsec_run_scenario(broken.as_ptr(), 1, &mut report, ptr::null_mut(), &mut violation);
        assert_eq!(s, IotsecStatus::ConfigError);
        let msg = CStr::from_ptr(iotsec_last_error()).to_str().unwrap();
        assert!(msg.contains("topology.devices[0].gateway"), "{msg}");
    }
}

#[test]
fn header_declares_every_entry_point() {
    let header = include_str!("../include/iotsec.h");
    for name in [
        "iotsec_last_error",
        "iotsec_version",
        "iotsec_string_free",
        "iotsec_key_material_size",
        "iotsec_run_scenario",
        "iotsec_demo_session_keys",
        "iotsec_tunnel_new",
        "iotsec_tunnel_free",
        "iotsec_tunnel_encapsulate",
        "iotsec_tunnel_decapsulate",
        "typedef struct IotsecTunnel IotsecTunnel",
        "IOTSEC_STATUS_BAD_TAG = 9",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let version = unsafe { CStr::from_ptr(iotsec_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile_dir();
    let src = dir.join("use_header.c");
    std::fs::write(
        &src,
        "#include \"iotsec.h\"\nint main(void) { uint32_t bits; return iotsec_key_material_size(128, IOTSEC_KEY_SCHEME_RSA, &bits) == IOTSEC_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", include])
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| {
            std::process::Command::new(c)
                .arg("--version")
                .output()
                .is_ok_and(|o| o.status.success())
        })
        .ok_or(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::path::PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("header_check");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
