//! C ABI for the iotsec library.
//!
//! Every entry point returns an [`IotsecStatus`]. On failure a description is
//! available from [`iotsec_last_error`] on the same thread. Tunnels are
//! opaque handles owned by the caller and released with
//! [`iotsec_tunnel_free`]; strings returned by the library are released with
//! [`iotsec_string_free`].

use iotsec::ecc::{key_material_size, KeyScheme, SecurityLevel};
use iotsec::handshake::{
    provision_pair, run_loopback, HandshakeConfig, LoopbackParty, Role, SessionKeys, LOOPBACK_SERVER_ID,
    SESSION_KEYS_LEN,
};
use iotsec::hash::sha256;
use iotsec::netsim::{run_scenario, ScenarioConfig};
use iotsec::tunnel::{establish_tunnel, InnerPacket, Route, TunnelError, TunnelSession};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::net::Ipv4Addr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

/// Length in bytes of serialized session keys.
pub const IOTSEC_SESSION_KEYS_LEN: usize = 132;
/// Largest frame `iotsec_tunnel_encapsulate` can produce.
pub const IOTSEC_MAX_FRAME_LEN: usize = 1257;
pub const IOTSEC_MAX_PAYLOAD: usize = 1200;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IotsecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidUtf8 = 3,
    ConfigError = 4,
    BufferTooSmall = 5,
    PayloadTooLarge = 6,
    MalformedFrame = 7,
    WrongSession = 8,
    BadTag = 9,
    Replay = 10,
    SequenceExhausted = 11,
    HandshakeFailed = 12,
    Panic = 13,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IotsecKeyScheme {
    Ecc = 0,
    Rsa = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IotsecRole {
    Initiator = 0,
    Responder = 1,
}

/// Opaque tunnel endpoint.
pub struct IotsecTunnel {
    session: TunnelSession,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(text).expect("nul bytes removed")));
}

fn fail(status: IotsecStatus, message: impl Into<String>) -> IotsecStatus {
    set_error(message);
    status
}

fn guard(body: impl FnOnce() -> IotsecStatus) -> IotsecStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|_| fail(IotsecStatus::Panic, "internal panic"))
}

fn tunnel_status(err: &TunnelError) -> IotsecStatus {
    match err {
        TunnelError::PayloadTooLarge(_) => IotsecStatus::PayloadTooLarge,
        TunnelError::SequenceExhausted => IotsecStatus::SequenceExhausted,
        TunnelError::BadMagic | TunnelError::BadVersion(_) | TunnelError::BadLength(_) => {
            IotsecStatus::MalformedFrame
        }
        TunnelError::BadTag => IotsecStatus::BadTag,
        TunnelError::Replay(_) => IotsecStatus::Replay,
        TunnelError::WrongSession => IotsecStatus::WrongSession,
        TunnelError::NoRoute(_) => IotsecStatus::InvalidArgument,
    }
}

/// # Safety
/// `ptr` must be null or valid for `len` bytes.
unsafe fn slice<'a>(ptr: *const u8, len: usize) -> Option<&'a [u8]> {
    if len == 0 {
        Some(&[])
    } else if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

/// Description of the last failure on this thread, or null. The pointer stays
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn iotsec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static, NUL-terminated version string.
#[no_mangle]
pub extern "C" fn iotsec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a pointer previously returned by this library and not
/// yet freed.
#[no_mangle]
pub unsafe extern "C" fn iotsec_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Key size in bits for `scheme` at `security_bits` (80, 112, 128, 192 or 256).
///
/// # Safety
/// `out_bits` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn iotsec_key_material_size(
    security_bits: u32,
    scheme: IotsecKeyScheme,
    out_bits: *mut u32,
) -> IotsecStatus {
    guard(|| {
        if out_bits.is_null() {
            return fail(IotsecStatus::NullPointer, "out_bits is null");
        }
        let level = match SecurityLevel::new(security_bits) {
            Ok(l) => l,
            Err(e) => return fail(IotsecStatus::InvalidArgument, e.to_string()),
        };
        let scheme = match scheme {
            IotsecKeyScheme::Ecc => KeyScheme::Ecc,
            IotsecKeyScheme::Rsa => KeyScheme::Rsa,
        };
        *out_bits = key_material_size(scheme, level);
        IotsecStatus::Ok
    })
}

/// Runs a scenario given as JSON text. On success `*out_report` receives the
/// report JSON (free with `iotsec_string_free`) and `*out_violation` whether
/// a security property was violated. `out_log` may be null; otherwise it
/// receives the event log.
///
/// # Safety
/// `scenario_json` must be a NUL-terminated string; the out pointers must be
/// valid for writes (`out_log` may be null).
#[no_mangle]
pub unsafe extern "C" fn iotsec_run_scenario(
    scenario_json: *const c_char,
    seed: u64,
    out_report: *mut *mut c_char,
    out_log: *mut *mut c_char,
    out_violation: *mut bool,
) -> IotsecStatus {
    guard(|| {
        if scenario_json.is_null() || out_report.is_null() || out_violation.is_null() {
            return fail(IotsecStatus::NullPointer, "required pointer is null");
        }
        let text = match CStr::from_ptr(scenario_json).to_str() {
            Ok(t) => t,
            Err(e) => return fail(IotsecStatus::InvalidUtf8, e.to_string()),
        };
        let config = match ScenarioConfig::from_json(text) {
            Ok(c) => c,
            Err(e) => return fail(IotsecStatus::ConfigError, e.to_string()),
        };
        let (report, log) = match run_scenario(&config, seed) {
            Ok(r) => r,
            Err(e) => return fail(IotsecStatus::ConfigError, e.to_string()),
        };
        let to_c = |s: String| CString::new(s).expect("JSON has no NUL").into_raw();
        *out_violation = report.security_violation;
        *out_report = to_c(report.to_json());
        if !out_log.is_null() {
            *out_log = to_c(log);
        }
        IotsecStatus::Ok
    })
}

/// Runs an in-memory handshake on the small test curve and writes the agreed
/// session keys (`IOTSEC_SESSION_KEYS_LEN` bytes) to `out_keys`. Both tunnel
/// ends can then be created from the same bytes with opposite roles.
///
/// # Safety
/// `out_keys` must be valid for `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn iotsec_demo_session_keys(
    seed: u64,
    out_keys: *mut u8,
    out_len: usize,
) -> IotsecStatus {
    guard(|| {
        if out_keys.is_null() {
            return fail(IotsecStatus::NullPointer, "out_keys is null");
        }
        if out_len < SESSION_KEYS_LEN {
            return fail(
                IotsecStatus::BufferTooSmall,
                format!("need {SESSION_KEYS_LEN} bytes"),
            );
        }
        let curve = iotsec::ecc::Curve::t17();
        let (registry, server, client) = provision_pair(curve.clone(), seed);
        let seed_bytes = seed.to_be_bytes();
        let outcome = run_loopback(
            &registry,
            LoopbackParty::new(
                HandshakeConfig::new(curve.clone(), client).expect_peer(LOOPBACK_SERVER_ID),
                sha256(&[b"ffi/initiator", &seed_bytes]),
            ),
            LoopbackParty::new(
                HandshakeConfig::new(curve, server),
                sha256(&[b"ffi/responder", &seed_bytes]),
            ),
            |_, _, _| {},
        );
        match outcome.initiator_keys() {
            Some(keys) if outcome.responder_keys() == Some(keys) => {
                ptr::copy_nonoverlapping(keys.to_bytes().as_ptr(), out_keys, SESSION_KEYS_LEN);
                IotsecStatus::Ok
            }
            _ => fail(IotsecStatus::HandshakeFailed, "handshake did not complete"),
        }
    })
}

/// Creates a tunnel endpoint from serialized session keys.
///
/// # Safety
/// `keys` must be valid for `keys_len` bytes and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn iotsec_tunnel_new(
    keys: *const u8,
    keys_len: usize,
    role: IotsecRole,
    out: *mut *mut IotsecTunnel,
) -> IotsecStatus {
    guard(|| {
        if out.is_null() {
            return fail(IotsecStatus::NullPointer, "out is null");
        }
        let Some(bytes) = slice(keys, keys_len) else {
            return fail(IotsecStatus::NullPointer, "keys is null");
        };
        let Ok(bytes) = <&[u8; SESSION_KEYS_LEN]>::try_from(bytes) else {
            return fail(
                IotsecStatus::InvalidArgument,
                format!("session keys must be {SESSION_KEYS_LEN} bytes, got {keys_len}"),
            );
        };
        let (role, route) = match role {
            IotsecRole::Initiator => (Role::Initiator, Route::new("local", "remote")),
            IotsecRole::Responder => (Role::Responder, Route::new("local", "remote")),
        };
        let session = establish_tunnel(&SessionKeys::from_bytes(bytes), role, route);
        *out = Box::into_raw(Box::new(IotsecTunnel { session }));
        IotsecStatus::Ok
    })
}

/// Releases a tunnel. Null is ignored.
///
/// # Safety
/// `tunnel` must be null or a handle from `iotsec_tunnel_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn iotsec_tunnel_free(tunnel: *mut IotsecTunnel) {
    if !tunnel.is_null() {
        drop(Box::from_raw(tunnel));
    }
}

/// Encrypts and authenticates one packet. Addresses are IPv4 in host byte
/// order. Writes the frame to `out_frame` and its length to `*out_len`;
/// `IOTSEC_MAX_FRAME_LEN` bytes always suffice.
///
/// # Safety
/// `tunnel` must be a live handle; `payload` valid for `payload_len` bytes;
/// `out_frame` valid for `out_cap` bytes; `out_len` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn iotsec_tunnel_encapsulate(
    tunnel: *mut IotsecTunnel,
    src: u32,
    dst: u32,
    payload: *const u8,
    payload_len: usize,
    out_frame: *mut u8,
    out_cap: usize,
    out_len: *mut usize,
) -> IotsecStatus {
    guard(|| {
        if tunnel.is_null() || out_frame.is_null() || out_len.is_null() {
            return fail(IotsecStatus::NullPointer, "required pointer is null");
        }
        let Some(payload) = slice(payload, payload_len) else {
            return fail(IotsecStatus::NullPointer, "payload is null");
        };
        let packet = InnerPacket::new(Ipv4Addr::from(src), Ipv4Addr::from(dst), payload.to_vec());
        let needed = iotsec::tunnel::FRAME_HEADER_LEN
            + iotsec::tunnel::INNER_HEADER_LEN
            + payload_len
            + iotsec::tunnel::TAG_LEN;
        if payload_len <= IOTSEC_MAX_PAYLOAD && out_cap < needed {
            *out_len = needed;
            return fail(IotsecStatus::BufferTooSmall, format!("need {needed} bytes"));
        }
        match (*tunnel).session.encapsulate(&packet) {
            Ok(frame) => {
                let bytes = frame.encode();
                ptr::copy_nonoverlapping(bytes.as_ptr(), out_frame, bytes.len());
                *out_len = bytes.len();
                IotsecStatus::Ok
            }
            Err(e) => fail(tunnel_status(&e), e.to_string()),
        }
    })
}

/// Verifies and decrypts one frame. Writes the payload to `out_payload`, its
/// length to `*out_len` and the inner addresses to `*out_src`/`*out_dst`.
///
/// # Safety
/// `tunnel` must be a live handle; `frame` valid for `frame_len` bytes;
/// `out_payload` valid for `out_cap` bytes; the other out pointers valid for
/// writes (`out_src` and `out_dst` may be null).
#[no_mangle]
pub unsafe extern "C" fn iotsec_tunnel_decapsulate(
    tunnel: *mut IotsecTunnel,
    frame: *const u8,
    frame_len: usize,
    out_payload: *mut u8,
    out_cap: usize,
    out_len: *mut usize,
    out_src: *mut u32,
    out_dst: *mut u32,
) -> IotsecStatus {
    guard(|| {
        if tunnel.is_null() || out_payload.is_null() || out_len.is_null() {
            return fail(IotsecStatus::NullPointer, "required pointer is null");
        }
        let Some(frame) = slice(frame, frame_len) else {
            return fail(IotsecStatus::NullPointer, "frame is null");
        };
        let max_payload = frame_len.saturating_sub(
            iotsec::tunnel::FRAME_HEADER_LEN + iotsec::tunnel::INNER_HEADER_LEN + iotsec::tunnel::TAG_LEN,
        );
        if out_cap < max_payload {
            *out_len = max_payload;
            return fail(IotsecStatus::BufferTooSmall, format!("need {max_payload} bytes"));
        }
        match (*tunnel).session.decapsulate_bytes(frame) {
            Ok(packet) => {
                ptr::copy_nonoverlapping(packet.payload.as_ptr(), out_payload, packet.payload.len());
                *out_len = packet.payload.len();
                if !out_src.is_null() {
                    *out_src = u32::from(packet.src);
                }
                if !out_dst.is_null() {
                    *out_dst = u32::from(packet.dst);
                }
                IotsecStatus::Ok
            }
            Err(e) => fail(tunnel_status(&e), e.to_string()),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let p = iotsec_last_error();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
    }

    #[test]
    fn exported_constants_match_library() {
        assert_eq!(IOTSEC_SESSION_KEYS_LEN, SESSION_KEYS_LEN);
        assert_eq!(IOTSEC_MAX_FRAME_LEN, iotsec::tunnel::MAX_FRAME_LEN);
        assert_eq!(IOTSEC_MAX_PAYLOAD, iotsec::tunnel::MAX_PAYLOAD);
    }

    #[test]
    fn key_sizes_through_abi() {
        let mut bits = 0;
        unsafe {
            assert_eq!(
                iotsec_key_material_size(128, IotsecKeyScheme::Rsa, &mut bits),
                IotsecStatus::Ok
            );
            assert_eq!(bits, 3072);
            assert_eq!(
                iotsec_key_material_size(80, IotsecKeyScheme::Ecc, &mut bits),
                IotsecStatus::Ok
            );
            assert_eq!(bits, 260);
            assert_eq!(
                iotsec_key_material_size(100, IotsecKeyScheme::Ecc, &mut bits),
                IotsecStatus::InvalidArgument
            );
            assert!(!last_error().is_empty());
            assert_eq!(
                iotsec_key_material_size(128, IotsecKeyScheme::Ecc, ptr::null_mut()),
                IotsecStatus::NullPointer
            );
        }
    }

    #[test]
    fn null_string_free_is_noop() {
        unsafe { iotsec_string_free(ptr::null_mut()) };
        unsafe { iotsec_tunnel_free(ptr::null_mut()) };
    }
}
