//! Deterministic Schnorr signatures over the module's curves.
//!
//! `R = k·G`, `e = H(enc(R) ‖ enc(Q) ‖ m) mod n`, `s = k + e·d mod n`.
//! The nonce `k` is a hash of the private scalar and the message, so signing
//! the same message twice yields the same signature.

use super::{Curve, EccError, KeyPair, Point};
use crate::hash::sha256;
use num_bigint::BigUint;
use num_traits::Zero;

const NONCE_LABEL: &[u8] = b"iotsec/schnorr-nonce";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub r_point: Point,
    pub s: BigUint,
}

impl Signature {
    /// `enc(R) ‖ s` with `s` fixed-width big-endian.
    pub fn encode(&self, curve: &Curve) -> Vec<u8> {
        let mut out = curve.encode_point(&self.r_point);
        out.extend(curve.encode_scalar(&self.s));
        out
    }

    pub fn decode(curve: &Curve, bytes: &[u8]) -> Result<Self, EccError> {
        let tag = *bytes
            .first()
            .ok_or_else(|| EccError::MalformedEncoding("empty signature".into()))?;
        let point_len = curve
            .encoded_point_len(tag)
            .ok_or_else(|| EccError::MalformedEncoding(format!("bad point tag {tag:#04x}")))?;
        if bytes.len() != point_len + curve.scalar_len() {
            return Err(EccError::MalformedEncoding(format!(
                "signature is {} bytes, expected {}",
                bytes.len(),
                point_len + curve.scalar_len()
            )));
        }
        let (r, s) = bytes.split_at(point_len);
        let r_point = curve.decode_point(r)?;
        Ok(Signature {
            r_point,
            s: BigUint::from_bytes_be(s),
        })
    }
}

fn challenge(curve: &Curve, r_point: &Point, public: &Point, message: &[u8]) -> BigUint {
    let r = curve.encode_point(r_point);
    let q = curve.encode_point(public);
    curve.scalar_from_digest(&sha256(&[&r, &q, message]))
}

pub fn sign(curve: &Curve, key: &KeyPair, message: &[u8]) -> Result<Signature, EccError> {
    if message.is_empty() {
        return Err(EccError::EmptyMessage);
    }
    let d = curve.encode_scalar(key.secret());
    let mut counter = 0u32;
    let k = loop {
        let k = curve.scalar_from_digest(&sha256(&[NONCE_LABEL, &d, message, &counter.to_be_bytes()]));
        if !k.is_zero() {
            break k;
        }
        counter += 1;
    };
    let r_point = curve.base_mul(&k);
    let e = challenge(curve, &r_point, key.public(), message);
    let s = (k + e * key.secret()) % curve.order();
    Ok(Signature { r_point, s })
}

/// Checks `s·G == R + e·Q`. Errors only when the signer's public key itself
/// is unusable; a bad signature is `Ok(false)`.
pub fn verify(
    curve: &Curve,
    public: &Point,
    message: &[u8],
    signature: &Signature,
) -> Result<bool, EccError> {
    if public.is_identity() || !curve.validate_point(public) {
        return Err(EccError::InvalidPoint(curve.name().to_string()));
    }
    if message.is_empty()
        || &signature.s >= curve.order()
        || signature.r_point.is_identity()
        || !curve.validate_point(&signature.r_point)
    {
        return Ok(false);
    }
    let e = challenge(curve, &signature.r_point, public, message);
    let lhs = curve.base_mul(&signature.s);
    let rhs = curve.add_affine(&signature.r_point, &curve.mul_unchecked(&e, public));
    Ok(lhs == rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecc::keygen;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn sign_verify_roundtrip() {
        for curve in [Curve::t17(), Curve::p256()] {
            let key = keygen(&curve, &mut ChaCha20Rng::seed_from_u64(11));
            let sig = sign(&curve, &key, b"hello gateway").unwrap();
            assert!(verify(&curve, key.public(), b"hello gateway", &sig).unwrap());
            assert_eq!(sig, sign(&curve, &key, b"hello gateway").unwrap());
            let decoded = Signature::decode(&curve, &sig.encode(&curve)).unwrap();
            assert_eq!(decoded, sig);
        }
    }

    #[test]
    fn wrong_message_fails_on_p256() {
        let curve = Curve::p256();
        let key = keygen(&curve, &mut ChaCha20Rng::seed_from_u64(3));
        let sig = sign(&curve, &key, b"m").unwrap();
        assert!(!verify(&curve, key.public(), b"n", &sig).unwrap());
    }

    #[test]
    fn empty_message_and_bad_key() {
        let curve = Curve::t17();
        let key = keygen(&curve, &mut ChaCha20Rng::seed_from_u64(3));
        assert_eq!(sign(&curve, &key, b"").unwrap_err(), EccError::EmptyMessage);
        let sig = sign(&curve, &key, b"x").unwrap();
        assert!(verify(&curve, &Point::Identity, b"x", &sig).is_err());
        assert!(verify(&curve, &Point::new(5u32, 2u32), b"x", &sig).is_err());
    }

    #[test]
    fn malformed_signature_bytes() {
        let curve = Curve::t17();
        assert!(Signature::decode(&curve, &[]).is_err());
        assert!(Signature::decode(&curve, &[0x04, 5, 1]).is_err());
        assert!(Signature::decode(&curve, &[0x07, 5, 1, 3]).is_err());
        assert!(Signature::decode(&curve, &[0x04, 5, 1, 3]).is_ok());
    }
}
