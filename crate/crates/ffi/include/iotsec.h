#ifndef IOTSEC_H
#define IOTSEC_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Length in bytes of serialized session keys.
 */
#define IOTSEC_SESSION_KEYS_LEN 132

/**
 * Largest frame `iotsec_tunnel_encapsulate` can produce.
 */
#define IOTSEC_MAX_FRAME_LEN 1257

#define IOTSEC_MAX_PAYLOAD 1200

typedef enum IotsecStatus {
  IOTSEC_STATUS_OK = 0,
  IOTSEC_STATUS_NULL_POINTER = 1,
  IOTSEC_STATUS_INVALID_ARGUMENT = 2,
  IOTSEC_STATUS_INVALID_UTF8 = 3,
  IOTSEC_STATUS_CONFIG_ERROR = 4,
  IOTSEC_STATUS_BUFFER_TOO_SMALL = 5,
  IOTSEC_STATUS_PAYLOAD_TOO_LARGE = 6,
  IOTSEC_STATUS_MALFORMED_FRAME = 7,
  IOTSEC_STATUS_WRONG_SESSION = 8,
  IOTSEC_STATUS_BAD_TAG = 9,
  IOTSEC_STATUS_REPLAY = 10,
  IOTSEC_STATUS_SEQUENCE_EXHAUSTED = 11,
  IOTSEC_STATUS_HANDSHAKE_FAILED = 12,
  IOTSEC_STATUS_PANIC = 13,
} IotsecStatus;

typedef enum IotsecKeyScheme {
  IOTSEC_KEY_SCHEME_ECC = 0,
  IOTSEC_KEY_SCHEME_RSA = 1,
} IotsecKeyScheme;

typedef enum IotsecRole {
  IOTSEC_ROLE_INITIATOR = 0,
  IOTSEC_ROLE_RESPONDER = 1,
} IotsecRole;

/**
 * Opaque tunnel endpoint.
 */
typedef struct IotsecTunnel IotsecTunnel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Description of the last failure on this thread, or null. The pointer stays
 * valid until the next library call on the same thread.
 */
const char *iotsec_last_error(void);

/**
 * Static, NUL-terminated version string.
 */
const char *iotsec_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a pointer previously returned by this library and not
 * yet freed.
 */
void iotsec_string_free(char *s);

/**
 * Key size in bits for `scheme` at `security_bits` (80, 112, 128, 192 or 256).
 *
 * # Safety
 * `out_bits` must be valid for a write.
 */
enum IotsecStatus iotsec_key_material_size(uint32_t security_bits,
                                           enum IotsecKeyScheme scheme,
                                           uint32_t *out_bits);

/**
 * Runs a scenario given as JSON text. On success `*out_report` receives the
 * report JSON (free with `iotsec_string_free`) and `*out_violation` whether
 * a security property was violated. `out_log` may be null; otherwise it
 * receives the event log.
 *
 * # Safety
 * `scenario_json` must be a NUL-terminated string; the out pointers must be
 * valid for writes (`out_log` may be null).
 */
enum IotsecStatus iotsec_run_scenario(const char *scenario_json,
                                      uint64_t seed,
                                      char **out_report,
                                      char **out_log,
                                      bool *out_violation);

/**
 * Runs an in-memory handshake on the small test curve and writes the agreed
 * session keys (`IOTSEC_SESSION_KEYS_LEN` bytes) to `out_keys`. Both tunnel
 * ends can then be created from the same bytes with opposite roles.
 *
 * # Safety
 * `out_keys` must be valid for `out_len` bytes.
 */
enum IotsecStatus iotsec_demo_session_keys(uint64_t seed, uint8_t *out_keys, size_t out_len);

/**
 * Creates a tunnel endpoint from serialized session keys.
 *
 * # Safety
 * `keys` must be valid for `keys_len` bytes and `out` valid for a write.
 */
enum IotsecStatus iotsec_tunnel_new(const uint8_t *keys,
                                    size_t keys_len,
                                    enum IotsecRole role,
                                    struct IotsecTunnel **out);

/**
 * Releases a tunnel. Null is ignored.
 *
 * # Safety
 * `tunnel` must be null or a handle from `iotsec_tunnel_new` not yet freed.
 */
void iotsec_tunnel_free(struct IotsecTunnel *tunnel);

/**
 * Encrypts and authenticates one packet. Addresses are IPv4 in host byte
 * order. Writes the frame to `out_frame` and its length to `*out_len`;
 * `IOTSEC_MAX_FRAME_LEN` bytes always suffice.
 *
 * # Safety
 * `tunnel` must be a live handle; `payload` valid for `payload_len` bytes;
 * `out_frame` valid for `out_cap` bytes; `out_len` valid for a write.
 */
enum IotsecStatus iotsec_tunnel_encapsulate(struct IotsecTunnel *tunnel,
                                            uint32_t src,
                                            uint32_t dst,
                                            const uint8_t *payload,
                                            size_t payload_len,
                                            uint8_t *out_frame,
                                            size_t out_cap,
                                            size_t *out_len);

/**
 * Verifies and decrypts one frame. Writes the payload to `out_payload`, its
 * length to `*out_len` and the inner addresses to `*out_src`/`*out_dst`.
 *
 * # Safety
 * `tunnel` must be a live handle; `frame` valid for `frame_len` bytes;
 * `out_payload` valid for `out_cap` bytes; the other out pointers valid for
 * writes (`out_src` and `out_dst` may be null).
 */
enum IotsecStatus iotsec_tunnel_decapsulate(struct IotsecTunnel *tunnel,
                                            const uint8_t *frame,
                                            size_t frame_len,
                                            uint8_t *out_payload,
                                            size_t out_cap,
                                            size_t *out_len,
                                            uint32_t *out_src,
                                            uint32_t *out_dst);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IOTSEC_H */
