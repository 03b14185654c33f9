//! Signed fixed-point encoding of reals as residues modulo the Paillier modulus.
//!
//! A real `x` is stored as `round(x * 2^scale_bits) mod n`; residues above
//! `n/2` read back as negative. Multiplying two encoded values (a ciphertext
//! raised to an encoded exponent) yields a residue at level 2, scaled by
//! `2^(2 * scale_bits)`.

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{FromPrimitive, Signed, ToPrimitive, Zero};
use serde::Serialize;

use crate::paillier::PublicKey;

pub const DEFAULT_SCALE_BITS: u32 = 32;
pub const MAX_LEVEL: u32 = 2;
const MAX_SCALE_BITS: u32 = 256;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("scale_bits must be in 1..={MAX_SCALE_BITS}, got {0}")]
    InvalidScale(u32),
    #[error("cannot encode non-finite value {0}")]
    NonFinite(f64),
    #[error("value {0} exceeds the representable magnitude")]
    Overflow(f64),
    #[error("level {0} is outside 1..={MAX_LEVEL}")]
    LevelOutOfRange(u32),
    #[error("residue is not below the modulus")]
    ResidueOutOfRange,
    #[error(
        "overflow budget exceeded: {params} parameters at 2^{scale_bits} scale with \
         {blind_bits}-bit blinding need more than {key_bits}-bit keys"
    )]
    BudgetExceeded {
        params: usize,
        scale_bits: u32,
        blind_bits: u32,
        key_bits: u32,
    },
}

pub type Result<T> = std::result::Result<T, CodecError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FixedPointCodec {
    scale_bits: u32,
    #[serde(skip)]
    n: BigUint,
    #[serde(skip)]
    half_n: BigUint,
    max_level: u32,
}

impl FixedPointCodec {
    pub fn new(n: &BigUint, scale_bits: u32) -> Result<Self> {
        if scale_bits == 0 || scale_bits > MAX_SCALE_BITS {
            return Err(CodecError::InvalidScale(scale_bits));
        }
        Ok(FixedPointCodec {
            scale_bits,
            n: n.clone(),
            half_n: n >> 1,
            max_level: MAX_LEVEL,
        })
    }

    pub fn for_key(pk: &PublicKey, scale_bits: u32) -> Result<Self> {
        Self::new(pk.n(), scale_bits)
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    pub fn max_level(&self) -> u32 {
        self.max_level
    }

    /// Quantization step at level 1.
    pub fn resolution(&self) -> f64 {
        (-(self.scale_bits as f64)).exp2()
    }

    pub fn encode(&self, x: f64) -> Result<BigUint> {
        if !x.is_finite() {
            return Err(CodecError::NonFinite(x));
        }
        // f64::round rounds half away from zero, so encode(-x) mirrors encode(x).
        let scaled = (x * (self.scale_bits as f64).exp2()).round();
        let v = BigInt::from_f64(scaled).ok_or(CodecError::Overflow(x))?;
        if v.magnitude() > &self.half_n {
            return Err(CodecError::Overflow(x));
        }
        Ok(self.signed_to_residue(&v))
    }

    /// Maps a signed integer into `[0, n)`; used for integer plaintexts such as blinding factors.
    pub fn signed_to_residue(&self, v: &BigInt) -> BigUint {
        let reduced = v.magnitude() % &self.n;
        if v.sign() == Sign::Minus && !reduced.is_zero() {
            &self.n - reduced
        } else {
            reduced
        }
    }

    /// Interprets a residue as a signed integer in `(-n/2, n/2]`.
    pub fn residue_to_signed(&self, v: &BigUint) -> Result<BigInt> {
        if *v >= self.n {
            return Err(CodecError::ResidueOutOfRange);
        }
        Ok(if *v > self.half_n {
            -BigInt::from_biguint(Sign::Plus, &self.n - v)
        } else {
            BigInt::from_biguint(Sign::Plus, v.clone())
        })
    }

    pub fn decode(&self, v: &BigUint, level: u32) -> Result<f64> {
        if level == 0 || level > self.max_level {
            return Err(CodecError::LevelOutOfRange(level));
        }
        let signed = self.residue_to_signed(v)?;
        let magnitude = signed.abs().to_f64().unwrap_or(f64::INFINITY);
        let value = magnitude / ((level * self.scale_bits) as f64).exp2();
        Ok(if signed.is_negative() { -value } else { value })
    }

    /// Checks that an inner product of `params` unit-norm terms, encoded at
    /// level 2 and blinded by a factor below `2^blind_bits`, stays below `n/2`.
    pub fn check_similarity_budget(&self, params: usize, blind_bits: u32) -> Result<()> {
        let bound = BigUint::from(params.max(1)) << (2 * self.scale_bits + blind_bits);
        if bound >= self.half_n {
            return Err(CodecError::BudgetExceeded {
                params,
                scale_bits: self.scale_bits,
                blind_bits,
                key_bits: self.n.bits() as u32,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paillier::{generate_keypair, PrivateKey};
    use num_traits::One;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn modulus() -> BigUint {
        // 2^127 - 1 is prime; any large odd modulus works for codec arithmetic.
        (BigUint::one() << 127u32) - 1u32
    }

    fn keys() -> &'static (PublicKey, PrivateKey) {
        static PAIR: std::sync::OnceLock<(PublicKey, PrivateKey)> = std::sync::OnceLock::new();
        PAIR.get_or_init(|| generate_keypair(256, &mut ChaCha20Rng::seed_from_u64(3)).unwrap())
    }

    fn codec(bits: u32) -> FixedPointCodec {
        FixedPointCodec::new(&modulus(), bits).unwrap()
    }

    #[test]
    fn exact_values() {
        let c = codec(16);
        assert_eq!(c.encode(0.0).unwrap(), BigUint::from(0u32));
        assert_eq!(c.encode(1.5).unwrap(), BigUint::from(98304u32));
        assert_eq!(c.encode(-1.0).unwrap(), modulus() - 65536u32);
        assert_eq!(c.decode(&BigUint::from(0u32), 1).unwrap(), 0.0);
        assert_eq!(c.decode(&(modulus() - 65536u32), 1).unwrap(), -1.0);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let c = codec(1);
        assert_eq!(c.encode(0.25).unwrap(), BigUint::from(1u32));
        assert_eq!(c.encode(-0.25).unwrap(), modulus() - 1u32);
    }

    #[test]
    fn quantization_bound_on_random_samples() {
        let c = codec(32);
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for _ in 0..2000 {
            let x: f64 = rng.gen_range(-10.0..10.0);
            let back = c.decode(&c.encode(x).unwrap(), 1).unwrap();
            assert!((back - x).abs() <= c.resolution(), "x={x} back={back}");
        }
    }

    #[test]
    fn level_two_product() {
        let c = codec(32);
        let n = modulus();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..500 {
            let a: f64 = rng.gen_range(-3.0..3.0);
            let b: f64 = rng.gen_range(-3.0..3.0);
            let prod = c.encode(a).unwrap() * c.encode(b).unwrap() % &n;
            let got = c.decode(&prod, 2).unwrap();
            assert!(
                (got - a * b).abs() <= (a.abs() + b.abs() + 1.0) * c.resolution(),
                "a={a} b={b}"
            );
        }
    }

    #[test]
    fn errors() {
        let c = codec(16);
        assert!(matches!(c.encode(f64::NAN), Err(CodecError::NonFinite(_))));
        assert!(matches!(c.encode(1e40), Err(CodecError::Overflow(_))));
        assert_eq!(
            c.decode(&BigUint::from(1u32), 3),
            Err(CodecError::LevelOutOfRange(3))
        );
        assert_eq!(
            c.decode(&BigUint::from(1u32), 0),
            Err(CodecError::LevelOutOfRange(0))
        );
        assert_eq!(c.decode(&modulus(), 1), Err(CodecError::ResidueOutOfRange));
        assert!(FixedPointCodec::new(&modulus(), 0).is_err());
    }

    #[test]
    fn budget() {
        let c = codec(32);
        // 2^7 params * 2^64 * 2^20 = 2^91 < 2^126.
        assert!(c.check_similarity_budget(100, 20).is_ok());
        // 2^40 * 2^64 * 2^20 = 2^124 < 2^126 still fits; 2^43 does not.
        assert!(c.check_similarity_budget(1 << 40, 20).is_ok());
        assert!(c.check_similarity_budget(1 << 43, 20).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_resolution(x in -1.0e6f64..1.0e6) {
            let c = codec(32);
            let back = c.decode(&c.encode(x).unwrap(), 1).unwrap();
            prop_assert!((back - x).abs() <= c.resolution());
        }

        #[test]
        fn sign_symmetry(x in 1.0e-6f64..1.0e6) {
            let c = codec(32);
            let pos = c.encode(x).unwrap();
            let neg = c.encode(-x).unwrap();
            prop_assert_eq!((pos + neg) % modulus(), BigUint::from(0u32));
        }

        #[test]
        fn homomorphic_add_and_level_two_product(
            a in -1.0e3f64..1.0e3,
            b in -1.0e3f64..1.0e3,
            seed in any::<u64>(),
        ) {
            let (pk, sk) = keys();
            let c = FixedPointCodec::for_key(pk, 32).unwrap();
            let mut r = ChaCha20Rng::seed_from_u64(seed);
            let ea = pk.encrypt(&c.encode(a).unwrap(), &mut r).unwrap();
            let eb = pk.encrypt(&c.encode(b).unwrap(), &mut r).unwrap();
            let sum = c.decode(&sk.decrypt(&pk.add(&ea, &eb).unwrap()).unwrap(), 1).unwrap();
            prop_assert!((sum - (a + b)).abs() <= 2.0 * c.resolution());
            let prod = pk.scalar_mul(&ea, &c.encode(b).unwrap()).unwrap();
            let prod = c.decode(&sk.decrypt(&prod).unwrap(), 2).unwrap();
            prop_assert!((prod - a * b).abs() <= (a.abs() + b.abs() + 1.0) * c.resolution());
        }
    }
}
