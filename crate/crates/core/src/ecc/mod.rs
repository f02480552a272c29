//! Short-Weierstrass elliptic-curve arithmetic over prime fields.
//!
//! Curves have the form `y^2 = x^3 + a*x + b (mod p)`. Points are exchanged in
//! affine form; scalar multiplication runs in Jacobian coordinates and converts
//! back once at the end.
//!
//! **Not constant time.** Inversion uses the extended Euclidean algorithm and
//! scalar multiplication branches on key bits. This module exists to make the
//! protocol layers above it concrete and testable, not to protect real secrets.

mod keysize;
mod schnorr;

pub use keysize::{key_material_size, KeyScheme, SecurityLevel, KEY_SIZE_TABLE};
pub use schnorr::{sign, verify, Signature};

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;
use std::fmt;
use std::sync::{Arc, OnceLock};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EccError {
    #[error("point is not a valid point on curve {0}")]
    InvalidPoint(String),
    #[error("malformed point or scalar encoding: {0}")]
    MalformedEncoding(String),
    #[error("unknown curve {0:?}")]
    UnknownCurve(String),
    #[error("{0} is not a security level listed in the key-size table")]
    UnknownLevel(u32),
    #[error("private scalar out of range [1, n-1]")]
    ScalarOutOfRange,
    #[error("refusing to sign an empty message")]
    EmptyMessage,
}

/// Version of the built-in curve table. Bumped whenever an entry changes.
pub const CURVE_TABLE_VERSION: u32 = 1;

struct CurveConstants {
    name: &'static str,
    p: &'static str,
    a: &'static str,
    b: &'static str,
    gx: &'static str,
    gy: &'static str,
    n: &'static str,
}

const CURVE_TABLE: [CurveConstants; 2] = [
    // 19-element toy group; small enough to enumerate exhaustively.
    CurveConstants {
        name: "T17",
        p: "11",
        a: "02",
        b: "02",
        gx: "05",
        gy: "01",
        n: "13",
    },
    // NIST P-256 (SEC 2 secp256r1).
    CurveConstants {
        name: "P256",
        p: "ffffffff00000001000000000000000000000000ffffffffffffffffffffffff",
        a: "ffffffff00000001000000000000000000000000fffffffffffffffffffffffc",
        b: "5ac635d8aa3a93e7b3ebbd55769886bc651d06b0cc53b0f63bce3c3e27d2604b",
        gx: "6b17d1f2e12c4247f8bce6e563a440f277037d812deb33a0f4a13945d898c296",
        gy: "4fe342e2fe1a7f9b8ee7eb4a7c0f9e162bce33576b315ececbb6406837bf51f5",
        n: "ffffffff00000000ffffffffffffffffbce6faada7179e84f3b9cac2fc632551",
    },
];

/// A point on a curve, or the identity ("point at infinity").
#[derive(Clone, PartialEq, Eq, Hash)]
pub enum Point {
    Identity,
    Affine { x: BigUint, y: BigUint },
}

impl Point {
    pub fn new(x: impl Into<BigUint>, y: impl Into<BigUint>) -> Self {
        Point::Affine {
            x: x.into(),
            y: y.into(),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Point::Identity)
    }

    pub fn x(&self) -> Option<&BigUint> {
        match self {
            Point::Identity => None,
            Point::Affine { x, .. } => Some(x),
        }
    }

    pub fn y(&self) -> Option<&BigUint> {
        match self {
            Point::Identity => None,
            Point::Affine { y, .. } => Some(y),
        }
    }
}

impl fmt::Debug for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Point::Identity => write!(f, "Identity"),
            Point::Affine { x, y } => write!(f, "({x:#x}, {y:#x})"),
        }
    }
}

/// Jacobian coordinates: (X, Y, Z) represents (X/Z^2, Y/Z^3); Z = 0 is the identity.
#[derive(Clone)]
struct Jacobian {
    x: BigUint,
    y: BigUint,
    z: BigUint,
}

/// Domain parameters of a prime-order curve.
#[derive(Clone)]
pub struct Curve {
    name: String,
    p: BigUint,
    a: BigUint,
    b: BigUint,
    g: Point,
    n: BigUint,
    h: u32,
    a_is_minus_3: bool,
    field_len: usize,
    scalar_len: usize,
    // Multiples 1..=15 of 2^(4i)·G for every 4-bit window i, built on first use.
    base_table: Arc<OnceLock<Vec<[Point; 15]>>>,
}

impl PartialEq for Curve {
    fn eq(&self, other: &Self) -> bool {
        self.p == other.p && self.a == other.a && self.b == other.b && self.g == other.g && self.n == other.n
    }
}

impl Eq for Curve {}

impl fmt::Debug for Curve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Curve")
            .field("name", &self.name)
            .field("p", &format_args!("{:#x}", self.p))
            .field("n", &format_args!("{:#x}", self.n))
            .finish()
    }
}

fn hex_uint(s: &str) -> BigUint {
    BigUint::parse_bytes(s.as_bytes(), 16).expect("curve table holds valid hex")
}

fn byte_len(v: &BigUint) -> usize {
    (v.bits() as usize).div_ceil(8)
}

impl Curve {
    /// Builds a curve from raw parameters, checking non-singularity and that
    /// `g` is an on-curve point of order `n`.
    pub fn new(
        name: impl Into<String>,
        p: BigUint,
        a: BigUint,
        b: BigUint,
        g: Point,
        n: BigUint,
    ) -> Result<Self, EccError> {
        let name = name.into();
        let a = a % &p;
        let b = b % &p;
        let a_is_minus_3 = &a + 3u32 == p;
        let curve = Curve {
            field_len: byte_len(&p),
            scalar_len: byte_len(&n),
            name: name.clone(),
            p,
            a,
            b,
            g,
            n,
            h: 1,
            a_is_minus_3,
            base_table: Arc::new(OnceLock::new()),
        };
        let disc = (BigUint::from(4u32) * curve.a.modpow(&BigUint::from(3u32), &curve.p)
            + BigUint::from(27u32) * &curve.b * &curve.b)
            % &curve.p;
        if disc.is_zero() || curve.g.is_identity() || !curve.validate_point(&curve.g) {
            return Err(EccError::InvalidPoint(name));
        }
        if !curve.mul_unchecked(&curve.n, &curve.g).is_identity() {
            return Err(EccError::InvalidPoint(name));
        }
        Ok(curve)
    }

    /// Looks a curve up in the built-in table ("T17" or "P256").
    pub fn by_name(name: &str) -> Result<Self, EccError> {
        let c = CURVE_TABLE
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| EccError::UnknownCurve(name.to_string()))?;
        Curve::new(
            c.name,
            hex_uint(c.p),
            hex_uint(c.a),
            hex_uint(c.b),
            Point::new(hex_uint(c.gx), hex_uint(c.gy)),
            hex_uint(c.n),
        )
    }

    pub fn t17() -> Self {
        Curve::by_name("T17").expect("built-in curve")
    }

    pub fn p256() -> Self {
        Curve::by_name("P256").expect("built-in curve")
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        CURVE_TABLE.iter().map(|c| c.name)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn a(&self) -> &BigUint {
        &self.a
    }

    pub fn b(&self) -> &BigUint {
        &self.b
    }

    pub fn generator(&self) -> &Point {
        &self.g
    }

    pub fn order(&self) -> &BigUint {
        &self.n
    }

    pub fn cofactor(&self) -> u32 {
        self.h
    }

    /// Width in bytes of one encoded field element.
    pub fn field_len(&self) -> usize {
        self.field_len
    }

    /// Width in bytes of one encoded scalar mod n.
    pub fn scalar_len(&self) -> usize {
        self.scalar_len
    }

    /// Length of an encoded non-identity point.
    pub fn point_len(&self) -> usize {
        1 + 2 * self.field_len
    }

    /// True iff `pt` is the identity or an affine point with coordinates in
    /// `[0, p)` satisfying the curve equation.
    pub fn validate_point(&self, pt: &Point) -> bool {
        match pt {
            Point::Identity => true,
            Point::Affine { x, y } => {
                if x >= &self.p || y >= &self.p {
                    return false;
                }
                let lhs = (y * y) % &self.p;
                let rhs = (x * x * x + &self.a * x + &self.b) % &self.p;
                lhs == rhs
            }
        }
    }

    fn check(&self, pt: &Point) -> Result<(), EccError> {
        if self.validate_point(pt) {
            Ok(())
        } else {
            Err(EccError::InvalidPoint(self.name.clone()))
        }
    }

    pub fn negate(&self, pt: &Point) -> Point {
        match pt {
            Point::Identity => Point::Identity,
            Point::Affine { x, y } => Point::Affine {
                x: x.clone(),
                y: self.sub(&BigUint::zero(), y),
            },
        }
    }

    /// Group addition by the chord-and-tangent rule.
    pub fn point_add(&self, p1: &Point, p2: &Point) -> Result<Point, EccError> {
        self.check(p1)?;
        self.check(p2)?;
        Ok(self.add_affine(p1, p2))
    }

    /// `k`-fold sum of `pt` by left-to-right double-and-add over 4-bit windows.
    pub fn scalar_mul(&self, k: &BigUint, pt: &Point) -> Result<Point, EccError> {
        self.check(pt)?;
        Ok(self.mul_unchecked(k, pt))
    }

    /// `k·G`, using a lazily built table of window multiples of the generator.
    pub fn base_mul(&self, k: &BigUint) -> Point {
        let table = self.base_table.get_or_init(|| self.build_base_table());
        let k = k % &self.n;
        let mut acc = self.to_jacobian(&Point::Identity);
        for (i, nibble) in nibbles_le(&k).enumerate() {
            if nibble != 0 {
                acc = self.jacobian_add(&acc, &self.to_jacobian(&table[i][nibble as usize - 1]));
            }
        }
        self.to_affine(&acc)
    }

    fn build_base_table(&self) -> Vec<[Point; 15]> {
        let windows = (self.n.bits() as usize).div_ceil(4);
        let mut table = Vec::with_capacity(windows);
        let mut base = self.g.clone();
        for _ in 0..windows {
            let mut row: Vec<Point> = Vec::with_capacity(15);
            let mut acc = Point::Identity;
            for _ in 0..15 {
                acc = self.add_affine(&acc, &base);
                row.push(acc.clone());
            }
            // 16·base = 15·base + base
            base = self.add_affine(&acc, &base);
            table.push(row.try_into().expect("15 entries"));
        }
        table
    }

    pub(crate) fn mul_unchecked(&self, k: &BigUint, pt: &Point) -> Point {
        if k.is_zero() || pt.is_identity() {
            return Point::Identity;
        }
        let base = self.to_jacobian(pt);
        let mut multiples = Vec::with_capacity(15);
        multiples.push(base.clone());
        for i in 1..15 {
            let next = self.jacobian_add(&multiples[i - 1], &base);
            multiples.push(next);
        }
        let digits: Vec<u8> = nibbles_le(k).collect();
        let mut acc = self.to_jacobian(&Point::Identity);
        for &nibble in digits.iter().rev() {
            for _ in 0..4 {
                acc = self.jacobian_double(&acc);
            }
            if nibble != 0 {
                acc = self.jacobian_add(&acc, &multiples[nibble as usize - 1]);
            }
        }
        self.to_affine(&acc)
    }

    fn add(&self, x: &BigUint, y: &BigUint) -> BigUint {
        let s = x + y;
        if s >= self.p {
            s - &self.p
        } else {
            s
        }
    }

    fn sub(&self, x: &BigUint, y: &BigUint) -> BigUint {
        if x >= y {
            x - y
        } else {
            &self.p - (y - x)
        }
    }

    fn mul(&self, x: &BigUint, y: &BigUint) -> BigUint {
        (x * y) % &self.p
    }

    /// Modular inverse by the extended Euclidean algorithm.
    pub(crate) fn inv(&self, x: &BigUint) -> BigUint {
        mod_inverse(x, &self.p).expect("nonzero field element is invertible")
    }

    fn add_affine(&self, p1: &Point, p2: &Point) -> Point {
        let (x1, y1, x2, y2) = match (p1, p2) {
            (Point::Identity, _) => return p2.clone(),
            (_, Point::Identity) => return p1.clone(),
            (Point::Affine { x: x1, y: y1 }, Point::Affine { x: x2, y: y2 }) => (x1, y1, x2, y2),
        };
        let slope = if x1 == x2 {
            if self.add(y1, y2).is_zero() {
                return Point::Identity;
            }
            // tangent: (3x^2 + a) / 2y
            let num = self.add(&self.mul(&BigUint::from(3u32), &self.mul(x1, x1)), &self.a);
            let den = self.add(y1, y1);
            self.mul(&num, &self.inv(&den))
        } else {
            let num = self.sub(y2, y1);
            let den = self.sub(x2, x1);
            self.mul(&num, &self.inv(&den))
        };
        let x3 = self.sub(&self.sub(&self.mul(&slope, &slope), x1), x2);
        let y3 = self.sub(&self.mul(&slope, &self.sub(x1, &x3)), y1);
        Point::Affine { x: x3, y: y3 }
    }

    fn to_jacobian(&self, pt: &Point) -> Jacobian {
        match pt {
            Point::Identity => Jacobian {
                x: BigUint::one(),
                y: BigUint::one(),
                z: BigUint::zero(),
            },
            Point::Affine { x, y } => Jacobian {
                x: x.clone(),
                y: y.clone(),
                z: BigUint::one(),
            },
        }
    }

    fn to_affine(&self, pt: &Jacobian) -> Point {
        if pt.z.is_zero() {
            return Point::Identity;
        }
        let zinv = self.inv(&pt.z);
        let zinv2 = self.mul(&zinv, &zinv);
        let zinv3 = self.mul(&zinv2, &zinv);
        Point::Affine {
            x: self.mul(&pt.x, &zinv2),
            y: self.mul(&pt.y, &zinv3),
        }
    }

    fn jacobian_double(&self, pt: &Jacobian) -> Jacobian {
        if pt.z.is_zero() || pt.y.is_zero() {
            return self.to_jacobian(&Point::Identity);
        }
        let yy = self.mul(&pt.y, &pt.y);
        let zz = self.mul(&pt.z, &pt.z);
        let s = self.mul(&BigUint::from(4u32), &self.mul(&pt.x, &yy));
        let m = if self.a_is_minus_3 {
            // 3(X - Z^2)(X + Z^2)
            let t = self.mul(&self.sub(&pt.x, &zz), &self.add(&pt.x, &zz));
            self.mul(&BigUint::from(3u32), &t)
        } else {
            let xx = self.mul(&pt.x, &pt.x);
            let azzzz = self.mul(&self.a, &self.mul(&zz, &zz));
            self.add(&self.mul(&BigUint::from(3u32), &xx), &azzzz)
        };
        let x3 = self.sub(&self.mul(&m, &m), &self.add(&s, &s));
        let yyyy8 = self.mul(&BigUint::from(8u32), &self.mul(&yy, &yy));
        let y3 = self.sub(&self.mul(&m, &self.sub(&s, &x3)), &yyyy8);
        let z3 = self.mul(&self.add(&pt.y, &pt.y), &pt.z);
        Jacobian { x: x3, y: y3, z: z3 }
    }

    fn jacobian_add(&self, p1: &Jacobian, p2: &Jacobian) -> Jacobian {
        if p1.z.is_zero() {
            return p2.clone();
        }
        if p2.z.is_zero() {
            return p1.clone();
        }
        let z1z1 = self.mul(&p1.z, &p1.z);
        let z2z2 = self.mul(&p2.z, &p2.z);
        let u1 = self.mul(&p1.x, &z2z2);
        let u2 = self.mul(&p2.x, &z1z1);
        let s1 = self.mul(&p1.y, &self.mul(&p2.z, &z2z2));
        let s2 = self.mul(&p2.y, &self.mul(&p1.z, &z1z1));
        if u1 == u2 {
            return if s1 == s2 {
                self.jacobian_double(p1)
            } else {
                self.to_jacobian(&Point::Identity)
            };
        }
        let h = self.sub(&u2, &u1);
        let r = self.sub(&s2, &s1);
        let hh = self.mul(&h, &h);
        let hhh = self.mul(&hh, &h);
        let u1hh = self.mul(&u1, &hh);
        let x3 = self.sub(&self.sub(&self.mul(&r, &r), &hhh), &self.add(&u1hh, &u1hh));
        let y3 = self.sub(&self.mul(&r, &self.sub(&u1hh, &x3)), &self.mul(&s1, &hhh));
        let z3 = self.mul(&h, &self.mul(&p1.z, &p2.z));
        Jacobian { x: x3, y: y3, z: z3 }
    }

    /// Uncompressed encoding: `0x00` for the identity, else `0x04 ‖ x ‖ y`
    /// with fixed-width big-endian coordinates.
    pub fn encode_point(&self, pt: &Point) -> Vec<u8> {
        match pt {
            Point::Identity => vec![0x00],
            Point::Affine { x, y } => {
                let mut out = Vec::with_capacity(self.point_len());
                out.push(0x04);
                out.extend(to_fixed_be(x, self.field_len));
                out.extend(to_fixed_be(y, self.field_len));
                out
            }
        }
    }

    pub fn decode_point(&self, bytes: &[u8]) -> Result<Point, EccError> {
        let pt = match bytes {
            [0x00] => Point::Identity,
            [0x04, rest @ ..] if rest.len() == 2 * self.field_len => {
                let (x, y) = rest.split_at(self.field_len);
                Point::Affine {
                    x: BigUint::from_bytes_be(x),
                    y: BigUint::from_bytes_be(y),
                }
            }
            _ => {
                return Err(EccError::MalformedEncoding(format!(
                    "{} bytes is not a valid {} point encoding",
                    bytes.len(),
                    self.name
                )))
            }
        };
        self.check(&pt)?;
        Ok(pt)
    }

    /// Length of the point encoding starting at `bytes[0]`, if the tag is known.
    pub(crate) fn encoded_point_len(&self, tag: u8) -> Option<usize> {
        match tag {
            0x00 => Some(1),
            0x04 => Some(self.point_len()),
            _ => None,
        }
    }

    pub fn encode_scalar(&self, k: &BigUint) -> Vec<u8> {
        to_fixed_be(k, self.scalar_len)
    }

    /// Reduces a hash output to a scalar mod n.
    pub(crate) fn scalar_from_digest(&self, digest: &[u8]) -> BigUint {
        BigUint::from_bytes_be(digest) % &self.n
    }
}

/// Little-endian sequence of 4-bit digits of `k`.
fn nibbles_le(k: &BigUint) -> impl Iterator<Item = u8> + '_ {
    k.to_bytes_le()
        .into_iter()
        .flat_map(|byte| [byte & 0x0f, byte >> 4])
}

fn to_fixed_be(v: &BigUint, width: usize) -> Vec<u8> {
    let raw = v.to_bytes_be();
    let raw: &[u8] = if v.is_zero() { &[] } else { &raw };
    debug_assert!(raw.len() <= width);
    let mut out = vec![0u8; width - raw.len()];
    out.extend_from_slice(raw);
    out
}

/// Extended Euclid; `None` when `gcd(x, m) != 1`.
pub fn mod_inverse(x: &BigUint, m: &BigUint) -> Option<BigUint> {
    let m_int = BigInt::from_biguint(Sign::Plus, m.clone());
    let (mut old_r, mut r) = (BigInt::from_biguint(Sign::Plus, x % m), m_int.clone());
    let (mut old_s, mut s) = (BigInt::one(), BigInt::zero());
    while !r.is_zero() {
        let (q, rem) = old_r.div_rem(&r);
        old_r = std::mem::replace(&mut r, rem);
        let next_s = &old_s - &q * &s;
        old_s = std::mem::replace(&mut s, next_s);
    }
    if !old_r.is_one() {
        return None;
    }
    old_s.mod_floor(&m_int).to_biguint()
}

/// A private scalar and its public point.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    secret: BigUint,
    public: Point,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    /// Rebuilds a key pair from a known private scalar in `[1, n-1]`.
    pub fn from_secret(curve: &Curve, secret: BigUint) -> Result<Self, EccError> {
        if secret.is_zero() || secret >= curve.n {
            return Err(EccError::ScalarOutOfRange);
        }
        let public = curve.base_mul(&secret);
        Ok(KeyPair { secret, public })
    }

    pub fn secret(&self) -> &BigUint {
        &self.secret
    }

    pub fn public(&self) -> &Point {
        &self.public
    }
}

/// Draws a private scalar uniformly from `[1, n-1]` by rejection sampling.
pub fn keygen<R: RngCore + ?Sized>(curve: &Curve, rng: &mut R) -> KeyPair {
    let bits = curve.n.bits() as usize;
    let mut buf = vec![0u8; curve.scalar_len];
    let excess = buf.len() * 8 - bits;
    loop {
        rng.fill_bytes(&mut buf);
        buf[0] &= 0xff >> excess;
        let d = BigUint::from_bytes_be(&buf);
        if !d.is_zero() && d < curve.n {
            let public = curve.base_mul(&d);
            return KeyPair { secret: d, public };
        }
    }
}

/// Shared secret: big-endian x-coordinate of `own.secret · peer_public`,
/// left-padded to the field width.
pub fn ecdh(curve: &Curve, own: &KeyPair, peer_public: &Point) -> Result<Vec<u8>, EccError> {
    if peer_public.is_identity() {
        return Err(EccError::InvalidPoint(curve.name.clone()));
    }
    let shared = curve.scalar_mul(&own.secret, peer_public)?;
    match shared {
        Point::Identity => Err(EccError::InvalidPoint(curve.name.clone())),
        Point::Affine { x, .. } => Ok(to_fixed_be(&x, curve.field_len)),
    }
}
