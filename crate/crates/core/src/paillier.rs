//! Paillier additively homomorphic encryption over `num-bigint` integers.
//!
//! The generator is fixed to `g = n + 1`, so `g^m mod n^2 = 1 + m*n` and the
//! private key reduces to `(lambda, mu)` with `lambda = lcm(p-1, q-1)`.
//!
//! Keys and ciphertexts have a compact binary form: big-endian magnitudes with
//! `u32` length prefixes. Key files start with a format-version byte, a kind
//! byte and the key size in bits.

use std::fmt;

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::wire::{ByteReader, ByteWriter};

/// Smallest modulus size accepted by [`generate_keypair`].
pub const MIN_KEY_BITS: u32 = 64;

/// Key size used by the reported experiments.
pub const PAPER_KEY_BITS: u32 = 1024;

/// Miller-Rabin rounds; each round has error at most 1/4, so 40 rounds stay below 2^-80.
const MILLER_RABIN_ROUNDS: usize = 40;

/// Candidates tried per prime are bounded by this multiple of the prime size.
const PRIME_ATTEMPTS_PER_BIT: usize = 200;

const KEY_FORMAT_VERSION: u8 = 1;
const KIND_PUBLIC: u8 = 0x01;
const KIND_PRIVATE: u8 = 0x02;

const SMALL_PRIMES: [u32; 54] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
    101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193,
    197, 199, 211, 223, 227, 229, 233, 239, 241, 251,
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PaillierError {
    #[error("key size of {0} bits is below the minimum of {MIN_KEY_BITS}")]
    KeyTooSmall(u32),
    #[error("key size must be even, got {0}")]
    OddKeySize(u32),
    #[error("no prime found after {0} candidates")]
    PrimeGeneration(usize),
    #[error("invalid primes: {0}")]
    InvalidPrimes(&'static str),
    #[error("plaintext is outside [0, n)")]
    PlaintextOutOfRange,
    #[error("scalar is outside [0, n)")]
    ScalarOutOfRange,
    #[error("ciphertext is not a unit modulo n^2")]
    InvalidCiphertext,
    #[error("ciphertext bound to key {found:016x}, expected {expected:016x}")]
    KeyMismatch { expected: u64, found: u64 },
    #[error("malformed encoding: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, PaillierError>;

/// Identifier that binds ciphertexts to the public key that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyId(pub u64);

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl KeyId {
    fn of_modulus(n: &BigUint) -> Self {
        let digest = Sha256::digest(n.to_bytes_be());
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        KeyId(u64::from_be_bytes(head))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    g: BigUint,
    half_n: BigUint,
    key_bits: u32,
    id: KeyId,
}

/// Decryption parameters. Deliberately not `Serialize`; the only way out is
/// [`PrivateKey::to_bytes`].
#[derive(Clone, PartialEq, Eq)]
pub struct PrivateKey {
    lambda: BigUint,
    mu: BigUint,
    n: BigUint,
    n_squared: BigUint,
    key_bits: u32,
    id: KeyId,
}

impl fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PrivateKey")
            .field("key_bits", &self.key_bits)
            .field("id", &self.id)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Ciphertext {
    value: BigUint,
    key_id: KeyId,
}

/// Generates a keypair whose modulus has exactly `key_bits` bits.
pub fn generate_keypair<R: Rng + ?Sized>(
    key_bits: u32,
    rng: &mut R,
) -> Result<(PublicKey, PrivateKey)> {
    if key_bits < MIN_KEY_BITS {
        return Err(PaillierError::KeyTooSmall(key_bits));
    }
    if !key_bits.is_multiple_of(2) {
        return Err(PaillierError::OddKeySize(key_bits));
    }
    let half = key_bits / 2;
    let p = generate_prime(half, rng)?;
    let budget = PRIME_ATTEMPTS_PER_BIT * half as usize;
    for _ in 0..budget {
        let q = generate_prime(half, rng)?;
        if q == p {
            continue;
        }
        match keypair_from_primes(&p, &q) {
            Ok(pair) => return Ok(pair),
            Err(PaillierError::InvalidPrimes(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(PaillierError::PrimeGeneration(budget))
}

/// Builds a keypair from explicit primes. Used for small worked examples and
/// for reloading keys; no minimum size is enforced here.
pub fn keypair_from_primes(p: &BigUint, q: &BigUint) -> Result<(PublicKey, PrivateKey)> {
    let one = BigUint::one();
    if p == q {
        return Err(PaillierError::InvalidPrimes("p and q must be distinct"));
    }
    if *p < BigUint::from(2u32) || *q < BigUint::from(2u32) {
        return Err(PaillierError::InvalidPrimes("p and q must be at least 2"));
    }
    let n = p * q;
    let phi = (p - &one) * (q - &one);
    if !n.gcd(&phi).is_one() {
        return Err(PaillierError::InvalidPrimes("gcd(pq, (p-1)(q-1)) != 1"));
    }
    let lambda = (p - &one).lcm(&(q - &one));
    let n_squared = &n * &n;
    let g = &n + &one;
    let key_bits = n.bits() as u32;
    let id = KeyId::of_modulus(&n);

    let u = g.modpow(&lambda, &n_squared);
    let mu = l_function(&u, &n)
        .modinv(&n)
        .ok_or(PaillierError::InvalidPrimes(
            "L(g^lambda) is not invertible mod n",
        ))?;

    let pk = PublicKey {
        half_n: &n >> 1,
        n: n.clone(),
        n_squared: n_squared.clone(),
        g,
        key_bits,
        id,
    };
    let sk = PrivateKey {
        lambda,
        mu,
        n,
        n_squared,
        key_bits,
        id,
    };
    Ok((pk, sk))
}

/// `L(x) = (x - 1) / n` with exact integer division.
fn l_function(x: &BigUint, n: &BigUint) -> BigUint {
    (x - 1u32) / n
}

impl PublicKey {
    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn key_bits(&self) -> u32 {
        self.key_bits
    }

    pub fn id(&self) -> KeyId {
        self.id
    }

    pub fn encrypt<R: Rng + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext> {
        let r = loop {
            let r = random_below(&self.n, rng);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                break r;
            }
        };
        self.encrypt_with_nonce(m, &r)
    }

    /// Deterministic encryption `g^m * r^n mod n^2` with caller-supplied `r`.
    pub fn encrypt_with_nonce(&self, m: &BigUint, r: &BigUint) -> Result<Ciphertext> {
        if *m >= self.n {
            return Err(PaillierError::PlaintextOutOfRange);
        }
        if r.is_zero() || *r >= self.n || !r.gcd(&self.n).is_one() {
            return Err(PaillierError::InvalidCiphertext);
        }
        // g = n + 1, so g^m = 1 + m*n (mod n^2).
        let gm = (BigUint::one() + m * &self.n) % &self.n_squared;
        let rn = r.modpow(&self.n, &self.n_squared);
        Ok(Ciphertext {
            value: gm * rn % &self.n_squared,
            key_id: self.id,
        })
    }

    /// Homomorphic addition: the product of ciphertexts decrypts to `m1 + m2 mod n`.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.check(a)?;
        self.check(b)?;
        Ok(Ciphertext {
            value: &a.value * &b.value % &self.n_squared,
            key_id: self.id,
        })
    }

    /// Folds [`PublicKey::add`] over a non-empty sequence.
    pub fn sum<'a, I>(&self, items: I) -> Result<Option<Ciphertext>>
    where
        I: IntoIterator<Item = &'a Ciphertext>,
    {
        let mut acc: Option<Ciphertext> = None;
        for c in items {
            acc = Some(match acc {
                None => {
                    self.check(c)?;
                    c.clone()
                }
                Some(prev) => self.add(&prev, c)?,
            });
        }
        Ok(acc)
    }

    /// Plaintext-scalar multiplication `c^k mod n^2`, decrypting to `m * k mod n`.
    ///
    /// Scalars above `n/2` are applied as `(c^-1)^(n-k)`. The result differs from
    /// `c^k` by an encryption of zero, so it decrypts identically while keeping
    /// the exponent short for the small negative residues that fixed-point
    /// encoding produces.
    pub fn scalar_mul(&self, c: &Ciphertext, k: &BigUint) -> Result<Ciphertext> {
        self.check(c)?;
        if *k >= self.n {
            return Err(PaillierError::ScalarOutOfRange);
        }
        let value = if *k > self.half_n {
            let inv = c
                .value
                .modinv(&self.n_squared)
                .ok_or(PaillierError::InvalidCiphertext)?;
            inv.modpow(&(&self.n - k), &self.n_squared)
        } else {
            c.value.modpow(k, &self.n_squared)
        };
        Ok(Ciphertext {
            value,
            key_id: self.id,
        })
    }

    fn check(&self, c: &Ciphertext) -> Result<()> {
        if c.key_id != self.id {
            return Err(PaillierError::KeyMismatch {
                expected: self.id.0,
                found: c.key_id.0,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u8(KEY_FORMAT_VERSION);
        w.u8(KIND_PUBLIC);
        w.u32(self.key_bits);
        w.biguint(&self.n);
        w.biguint(&self.g);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let key_bits = read_key_header(&mut r, KIND_PUBLIC)?;
        let n = r.biguint().map_err(fmt_err)?;
        let g = r.biguint().map_err(fmt_err)?;
        r.finish().map_err(fmt_err)?;
        if n.bits() as u32 != key_bits {
            return Err(PaillierError::Format(
                "modulus size disagrees with header".into(),
            ));
        }
        if g != &n + 1u32 {
            return Err(PaillierError::Format("generator must be n + 1".into()));
        }
        Ok(Self::from_modulus(n))
    }

    /// Public key for a modulus, with `g = n + 1`.
    pub fn from_modulus(n: BigUint) -> Self {
        PublicKey {
            n_squared: &n * &n,
            g: &n + 1u32,
            half_n: &n >> 1,
            key_bits: n.bits() as u32,
            id: KeyId::of_modulus(&n),
            n,
        }
    }
}

impl PrivateKey {
    pub fn key_bits(&self) -> u32 {
        self.key_bits
    }

    pub fn id(&self) -> KeyId {
        self.id
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    /// The public half of the keypair.
    pub fn public_key(&self) -> PublicKey {
        PublicKey::from_modulus(self.n.clone())
    }

    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint> {
        if c.key_id != self.id {
            return Err(PaillierError::KeyMismatch {
                expected: self.id.0,
                found: c.key_id.0,
            });
        }
        if c.value.is_zero() || c.value >= self.n_squared || !c.value.gcd(&self.n).is_one() {
            return Err(PaillierError::InvalidCiphertext);
        }
        let u = c.value.modpow(&self.lambda, &self.n_squared);
        Ok(l_function(&u, &self.n) * &self.mu % &self.n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u8(KEY_FORMAT_VERSION);
        w.u8(KIND_PRIVATE);
        w.u32(self.key_bits);
        w.biguint(&self.n);
        w.biguint(&self.lambda);
        w.biguint(&self.mu);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let key_bits = read_key_header(&mut r, KIND_PRIVATE)?;
        let n = r.biguint().map_err(fmt_err)?;
        let lambda = r.biguint().map_err(fmt_err)?;
        let mu = r.biguint().map_err(fmt_err)?;
        r.finish().map_err(fmt_err)?;
        if n.bits() as u32 != key_bits || n.is_zero() {
            return Err(PaillierError::Format(
                "modulus size disagrees with header".into(),
            ));
        }
        let n_squared = &n * &n;
        let g = &n + 1u32;
        let u = g.modpow(&lambda, &n_squared);
        if !(l_function(&u, &n) * &mu % &n).is_one() {
            return Err(PaillierError::Format("mu * L(g^lambda) != 1 mod n".into()));
        }
        Ok(PrivateKey {
            id: KeyId::of_modulus(&n),
            lambda,
            mu,
            n,
            n_squared,
            key_bits,
        })
    }
}

fn read_key_header(r: &mut ByteReader<'_>, kind: u8) -> Result<u32> {
    let version = r.u8().map_err(fmt_err)?;
    if version != KEY_FORMAT_VERSION {
        return Err(PaillierError::Format(format!(
            "unsupported key format version {version}"
        )));
    }
    let found = r.u8().map_err(fmt_err)?;
    if found != kind {
        return Err(PaillierError::Format(format!(
            "expected key kind {kind:#04x}, found {found:#04x}"
        )));
    }
    r.u32().map_err(fmt_err)
}

fn fmt_err(e: crate::wire::WireError) -> PaillierError {
    PaillierError::Format(e.to_string())
}

impl Ciphertext {
    /// Wraps a raw residue. Range is checked on decryption, not here.
    pub fn from_raw(value: BigUint, key_id: KeyId) -> Self {
        Ciphertext { value, key_id }
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u64(self.key_id.0);
        w.biguint(&self.value);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let key_id = KeyId(r.u64().map_err(fmt_err)?);
        let value = r.biguint().map_err(fmt_err)?;
        r.finish().map_err(fmt_err)?;
        Ok(Ciphertext { value, key_id })
    }
}

#[derive(Serialize, Deserialize)]
struct CiphertextRepr {
    key_id: KeyId,
    value: String,
}

impl Serialize for Ciphertext {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CiphertextRepr {
            key_id: self.key_id,
            value: self.value.to_str_radix(16),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Ciphertext {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = CiphertextRepr::deserialize(d)?;
        let value = BigUint::parse_bytes(repr.value.as_bytes(), 16)
            .ok_or_else(|| serde::de::Error::custom("invalid hex ciphertext"))?;
        Ok(Ciphertext {
            value,
            key_id: repr.key_id,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PublicKeyRepr {
    key_bits: u32,
    n: String,
}

impl Serialize for PublicKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PublicKeyRepr {
            key_bits: self.key_bits,
            n: self.n.to_str_radix(16),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = PublicKeyRepr::deserialize(d)?;
        let n = BigUint::parse_bytes(repr.n.as_bytes(), 16)
            .ok_or_else(|| serde::de::Error::custom("invalid hex modulus"))?;
        Ok(PublicKey::from_modulus(n))
    }
}

/// Uniform integer in `[0, 2^bits)`.
pub fn random_bits<R: Rng + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    if bits == 0 {
        return BigUint::zero();
    }
    let nbytes = bits.div_ceil(8) as usize;
    let mut buf = vec![0u8; nbytes];
    rng.fill_bytes(&mut buf);
    let excess = nbytes as u64 * 8 - bits;
    buf[0] &= 0xffu8 >> excess;
    BigUint::from_bytes_be(&buf)
}

/// Uniform integer in `[0, bound)` by rejection sampling.
pub fn random_below<R: Rng + ?Sized>(bound: &BigUint, rng: &mut R) -> BigUint {
    assert!(!bound.is_zero(), "empty range");
    let bits = bound.bits();
    loop {
        let x = random_bits(bits, rng);
        if x < *bound {
            return x;
        }
    }
}

/// Miller-Rabin with random bases after trial division by small primes.
pub fn is_probable_prime<R: Rng + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for &sp in SMALL_PRIMES.iter() {
        let sp = BigUint::from(sp);
        if *n == sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    let span = n - 3u32;
    'witness: for _ in 0..rounds {
        let a = random_below(&span, rng) + &two;
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Random prime with exactly `bits` bits and its top two bits set, so the
/// product of two such primes has exactly `2 * bits` bits.
pub fn generate_prime<R: Rng + ?Sized>(bits: u32, rng: &mut R) -> Result<BigUint> {
    if bits < 3 {
        return Err(PaillierError::InvalidPrimes("prime size below 3 bits"));
    }
    let budget = PRIME_ATTEMPTS_PER_BIT * bits as usize;
    let top = (BigUint::one() << (bits - 1)) | (BigUint::one() << (bits - 2));
    for _ in 0..budget {
        let candidate = random_bits(bits as u64, rng) | &top | BigUint::one();
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return Ok(candidate);
        }
    }
    Err(PaillierError::PrimeGeneration(budget))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn small_pair() -> (PublicKey, PrivateKey) {
        keypair_from_primes(&BigUint::from(5u32), &BigUint::from(7u32)).unwrap()
    }

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn toy_key_from_five_and_seven() {
        let (pk, sk) = small_pair();
        assert_eq!(*pk.n(), BigUint::from(35u32));
        assert_eq!(*sk.lambda(), BigUint::from(12u32));
        assert_eq!(*pk.g(), BigUint::from(36u32));
        // mu = L(36^12 mod 1225)^-1 mod 35; 36^12 = 1 + 12*35 mod 1225 so mu = 12^-1 mod 35 = 3.
        assert_eq!(*sk.mu(), BigUint::from(3u32));
    }

    #[test]
    fn toy_encryption_matches_hand_computed_residue() {
        let (pk, sk) = small_pair();
        let c = pk
            .encrypt_with_nonce(&BigUint::from(3u32), &BigUint::from(2u32))
            .unwrap();
        // Independent square-and-multiply over u64: 36^3 * 2^35 mod 1225.
        fn pow_mod(mut b: u64, mut e: u64, m: u64) -> u64 {
            let mut acc = 1;
            b %= m;
            while e > 0 {
                if e & 1 == 1 {
                    acc = acc * b % m;
                }
                b = b * b % m;
                e >>= 1;
            }
            acc
        }
        let expected = pow_mod(36, 3, 1225) * pow_mod(2, 35, 1225) % 1225;
        assert_eq!(expected, 683);
        assert_eq!(*c.value(), BigUint::from(expected));
        assert_eq!(sk.decrypt(&c).unwrap(), BigUint::from(3u32));
    }

    #[test]
    fn rejects_equal_primes_and_common_factors() {
        let five = BigUint::from(5u32);
        assert!(keypair_from_primes(&five, &five).is_err());
        // p=3, q=7: (p-1)(q-1)=12 shares 3 with 21.
        assert_eq!(
            keypair_from_primes(&BigUint::from(3u32), &BigUint::from(7u32)).unwrap_err(),
            PaillierError::InvalidPrimes("gcd(pq, (p-1)(q-1)) != 1")
        );
    }

    #[test]
    fn keygen_postconditions() {
        let (pk, sk) = generate_keypair(128, &mut rng(1)).unwrap();
        assert_eq!(pk.key_bits(), 128);
        assert_eq!(pk.n().bits(), 128);
        assert_eq!(*pk.n_squared(), pk.n() * pk.n());
        assert_eq!(pk.id(), sk.id());
        let u = pk.g().modpow(sk.lambda(), pk.n_squared());
        assert!((l_function(&u, pk.n()) * sk.mu() % pk.n()).is_one());
    }

    #[test]
    fn keygen_is_deterministic_under_seed() {
        let a = generate_keypair(96, &mut rng(42)).unwrap();
        let b = generate_keypair(96, &mut rng(42)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = generate_keypair(96, &mut rng(43)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn keygen_rejects_small_or_odd_sizes() {
        assert_eq!(
            generate_keypair(32, &mut rng(0)).unwrap_err(),
            PaillierError::KeyTooSmall(32)
        );
        assert_eq!(
            generate_keypair(65, &mut rng(0)).unwrap_err(),
            PaillierError::OddKeySize(65)
        );
    }

    #[test]
    fn zero_round_trips_and_encryption_is_randomized() {
        let (pk, sk) = generate_keypair(128, &mut rng(2)).unwrap();
        let mut r = rng(3);
        let zero = BigUint::zero();
        let a = pk.encrypt(&zero, &mut r).unwrap();
        let b = pk.encrypt(&zero, &mut r).unwrap();
        assert_ne!(a, b);
        assert_eq!(sk.decrypt(&a).unwrap(), zero);
        assert_eq!(sk.decrypt(&b).unwrap(), zero);
    }

    #[test]
    fn homomorphic_laws_on_small_values() {
        let (pk, sk) = generate_keypair(128, &mut rng(4)).unwrap();
        let mut r = rng(5);
        let e = |m: u32, r: &mut ChaCha20Rng| pk.encrypt(&BigUint::from(m), r).unwrap();
        let sum = pk.add(&e(5, &mut r), &e(9, &mut r)).unwrap();
        assert_eq!(sk.decrypt(&sum).unwrap(), BigUint::from(14u32));
        let prod = pk.scalar_mul(&e(6, &mut r), &BigUint::from(4u32)).unwrap();
        assert_eq!(sk.decrypt(&prod).unwrap(), BigUint::from(24u32));

        let m = BigUint::from(77u32);
        let c = pk.encrypt(&m, &mut r).unwrap();
        let ident = pk.add(&c, &e(0, &mut r)).unwrap();
        assert_eq!(sk.decrypt(&ident).unwrap(), m);
        assert_eq!(
            sk.decrypt(&pk.scalar_mul(&c, &BigUint::one()).unwrap())
                .unwrap(),
            m
        );
        assert!(sk
            .decrypt(&pk.scalar_mul(&c, &BigUint::zero()).unwrap())
            .unwrap()
            .is_zero());
        let neg = pk.scalar_mul(&c, &(pk.n() - 1u32)).unwrap();
        assert_eq!(sk.decrypt(&neg).unwrap(), pk.n() - &m);

        let ones: Vec<_> = (0..17).map(|_| e(1, &mut r)).collect();
        let folded = pk.sum(&ones).unwrap().unwrap();
        assert_eq!(sk.decrypt(&folded).unwrap(), BigUint::from(17u32));
    }

    #[test]
    fn range_and_key_errors() {
        let (pk, sk) = generate_keypair(64, &mut rng(6)).unwrap();
        let (other, _) = generate_keypair(64, &mut rng(7)).unwrap();
        let mut r = rng(8);
        assert_eq!(
            pk.encrypt(pk.n(), &mut r).unwrap_err(),
            PaillierError::PlaintextOutOfRange
        );
        let c = pk.encrypt(&BigUint::from(3u32), &mut r).unwrap();
        let d = other.encrypt(&BigUint::from(3u32), &mut r).unwrap();
        assert!(matches!(
            pk.add(&c, &d),
            Err(PaillierError::KeyMismatch { .. })
        ));
        assert_eq!(
            pk.scalar_mul(&c, pk.n()).unwrap_err(),
            PaillierError::ScalarOutOfRange
        );
        assert!(matches!(
            sk.decrypt(&d),
            Err(PaillierError::KeyMismatch { .. })
        ));
        let junk = Ciphertext::from_raw(pk.n().clone(), pk.id());
        assert_eq!(
            sk.decrypt(&junk).unwrap_err(),
            PaillierError::InvalidCiphertext
        );
        let zero = Ciphertext::from_raw(BigUint::zero(), pk.id());
        assert_eq!(
            sk.decrypt(&zero).unwrap_err(),
            PaillierError::InvalidCiphertext
        );
    }

    #[test]
    fn key_and_ciphertext_bytes_round_trip() {
        let (pk, sk) = generate_keypair(128, &mut rng(9)).unwrap();
        let pk2 = PublicKey::from_bytes(&pk.to_bytes()).unwrap();
        let sk2 = PrivateKey::from_bytes(&sk.to_bytes()).unwrap();
        assert_eq!(pk, pk2);
        assert_eq!(sk, sk2);
        assert_eq!(pk.to_bytes()[0], KEY_FORMAT_VERSION);
        let c = pk.encrypt(&BigUint::from(1234u32), &mut rng(10)).unwrap();
        let c2 = Ciphertext::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(c, c2);
        assert_eq!(sk2.decrypt(&c2).unwrap(), BigUint::from(1234u32));

        assert!(PrivateKey::from_bytes(&pk.to_bytes()).is_err());
        let mut bad = sk.to_bytes();
        let last = bad.len() - 1;
        bad[last] ^= 1;
        assert!(PrivateKey::from_bytes(&bad).is_err());
        assert!(PublicKey::from_bytes(&pk.to_bytes()[..5]).is_err());
    }

    #[test]
    fn primality_agrees_with_trial_division() {
        let mut r = rng(11);
        for n in 0u32..3000 {
            let naive = n >= 2 && (2..n).take_while(|d| d * d <= n).all(|d| n % d != 0);
            assert_eq!(
                is_probable_prime(&BigUint::from(n), 20, &mut r),
                naive,
                "n={n}"
            );
        }
        // Carmichael numbers.
        for n in [561u32, 1105, 1729, 2465, 2821, 6601, 8911, 41041, 825265] {
            assert!(!is_probable_prime(&BigUint::from(n), 20, &mut r));
        }
    }

    fn shared_pair() -> &'static (PublicKey, PrivateKey) {
        static PAIR: std::sync::OnceLock<(PublicKey, PrivateKey)> = std::sync::OnceLock::new();
        PAIR.get_or_init(|| generate_keypair(128, &mut rng(17)).unwrap())
    }

    fn residue(bytes: &[u8], n: &BigUint) -> BigUint {
        BigUint::from_bytes_be(bytes) % n
    }

    proptest::proptest! {
        #[test]
        fn laws_hold_for_arbitrary_plaintexts(
            a in proptest::collection::vec(proptest::num::u8::ANY, 1..20),
            b in proptest::collection::vec(proptest::num::u8::ANY, 1..20),
            k in proptest::collection::vec(proptest::num::u8::ANY, 1..20),
            seed in proptest::num::u64::ANY,
        ) {
            let (pk, sk) = shared_pair();
            let n = pk.n();
            let (m1, m2, k) = (residue(&a, n), residue(&b, n), residue(&k, n));
            let mut r = rng(seed);
            let c1 = pk.encrypt(&m1, &mut r).unwrap();
            let c2 = pk.encrypt(&m2, &mut r).unwrap();
            proptest::prop_assert_eq!(sk.decrypt(&c1).unwrap(), m1.clone());
            proptest::prop_assert_eq!(sk.decrypt(&pk.add(&c1, &c2).unwrap()).unwrap(), (&m1 + &m2) % n);
            proptest::prop_assert_eq!(
                sk.decrypt(&pk.scalar_mul(&c1, &k).unwrap()).unwrap(),
                (&m1 * &k) % n
            );
            proptest::prop_assert!(c1.value() < pk.n_squared());
        }

        #[test]
        fn encrypted_inner_product(
            pairs in proptest::collection::vec((proptest::num::u64::ANY, proptest::num::u64::ANY), 1..8),
            seed in proptest::num::u64::ANY,
        ) {
            let (pk, sk) = shared_pair();
            let n = pk.n();
            let mut r = rng(seed);
            let terms: Vec<Ciphertext> = pairs
                .iter()
                .map(|&(a, b)| {
                    let c = pk.encrypt(&(BigUint::from(a) % n), &mut r).unwrap();
                    pk.scalar_mul(&c, &(BigUint::from(b) % n)).unwrap()
                })
                .collect();
            let want = pairs
                .iter()
                .fold(BigUint::zero(), |acc, &(a, b)| (acc + BigUint::from(a) * BigUint::from(b)) % n);
            proptest::prop_assert_eq!(sk.decrypt(&pk.sum(&terms).unwrap().unwrap()).unwrap(), want);
        }
    }
}
