//! Cosine weight similarity, in the clear and as the three-party blinded
//! pipeline: the initiator encrypts its normalized weights, the server blinds
//! them with a secret integer `l`, a participant folds in its own normalized
//! weights homomorphically and decrypts `S * l`, and the server divides by `l`.

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fixed_point::{CodecError, FixedPointCodec};
use crate::paillier::{Ciphertext, PaillierError, PrivateKey, PublicKey};

pub const DEFAULT_BLIND_BITS: u32 = 20;
const MAX_BLIND_BITS: u32 = 62;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimilarityError {
    #[error("weight vector has zero norm")]
    DegenerateWeights,
    #[error("length mismatch: expected {expected}, got {found}")]
    Length { expected: usize, found: usize },
    #[error("blinding factor {l} is outside [2, 2^{blind_bits})")]
    BlindOutOfRange { l: u64, blind_bits: u32 },
    #[error("blind_bits must be in 2..={MAX_BLIND_BITS}, got {0}")]
    BlindBits(u32),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Paillier(#[from] PaillierError),
}

pub type Result<T> = std::result::Result<T, SimilarityError>;

/// L2-normalized flat weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityComponent {
    values: Vec<f64>,
}

impl SimilarityComponent {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SimilarityScore(pub f64);

impl SimilarityScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Server-secret integer blind, `2 <= l < 2^blind_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindingFactor {
    l: u64,
    blind_bits: u32,
}

impl BlindingFactor {
    pub fn new(l: u64, blind_bits: u32) -> Result<Self> {
        check_blind_bits(blind_bits)?;
        if l < 2 || l >= 1u64 << blind_bits {
            return Err(SimilarityError::BlindOutOfRange { l, blind_bits });
        }
        Ok(BlindingFactor { l, blind_bits })
    }

    pub fn sample<R: Rng + ?Sized>(blind_bits: u32, rng: &mut R) -> Result<Self> {
        check_blind_bits(blind_bits)?;
        Ok(BlindingFactor {
            l: rng.gen_range(2..1u64 << blind_bits),
            blind_bits,
        })
    }

    pub fn value(&self) -> u64 {
        self.l
    }

    pub fn blind_bits(&self) -> u32 {
        self.blind_bits
    }
}

fn check_blind_bits(blind_bits: u32) -> Result<()> {
    if !(2..=MAX_BLIND_BITS).contains(&blind_bits) {
        return Err(SimilarityError::BlindBits(blind_bits));
    }
    Ok(())
}

/// Encrypted component after the server raised every element to `l`.
/// Carries `blind_bits`, a public bound, so the receiver can check its overflow budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlindedComponent {
    pub ciphers: Vec<Ciphertext>,
    pub blind_bits: u32,
}

impl BlindedComponent {
    pub fn len(&self) -> usize {
        self.ciphers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ciphers.is_empty()
    }
}

fn l2_norm(w: &[f64]) -> f64 {
    w.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn normalize_weights(w: &[f64]) -> Result<SimilarityComponent> {
    let norm = l2_norm(w);
    if norm == 0.0 || !norm.is_finite() {
        return Err(SimilarityError::DegenerateWeights);
    }
    Ok(SimilarityComponent {
        values: w.iter().map(|v| v / norm).collect(),
    })
}

pub fn plaintext_cosine(u: &[f64], v: &[f64]) -> Result<SimilarityScore> {
    if u.len() != v.len() {
        return Err(SimilarityError::Length {
            expected: u.len(),
            found: v.len(),
        });
    }
    let (a, b) = (normalize_weights(u)?, normalize_weights(v)?);
    Ok(SimilarityScore(dot(a.values(), b.values())))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Encodes and encrypts each value with a fresh nonce.
pub fn encrypt_values<R: Rng + ?Sized>(
    pk: &PublicKey,
    values: &[f64],
    codec: &FixedPointCodec,
    rng: &mut R,
) -> Result<Vec<Ciphertext>> {
    values
        .iter()
        .map(|&v| Ok(pk.encrypt(&codec.encode(v)?, rng)?))
        .collect()
}

/// Decrypts and decodes each ciphertext at the given fixed-point level.
pub fn decrypt_values(
    sk: &PrivateKey,
    ciphers: &[Ciphertext],
    codec: &FixedPointCodec,
    level: u32,
) -> Result<Vec<f64>> {
    ciphers
        .iter()
        .map(|c| Ok(codec.decode(&sk.decrypt(c)?, level)?))
        .collect()
}

pub fn encrypt_component<R: Rng + ?Sized>(
    pk: &PublicKey,
    comp: &SimilarityComponent,
    codec: &FixedPointCodec,
    rng: &mut R,
) -> Result<Vec<Ciphertext>> {
    encrypt_values(pk, comp.values(), codec, rng)
}

pub fn blind_component(
    pk: &PublicKey,
    ciphers: &[Ciphertext],
    l: &BlindingFactor,
) -> Result<BlindedComponent> {
    let k = BigUint::from(l.value());
    let ciphers = ciphers
        .iter()
        .map(|c| pk.scalar_mul(c, &k))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(BlindedComponent {
        ciphers,
        blind_bits: l.blind_bits(),
    })
}

/// `prod_i E(w_so_i * l)^encode(w_sp_i)`, which decrypts to `S * l` at level 2.
pub fn compute_blinded_score(
    pk: &PublicKey,
    blinded: &BlindedComponent,
    w_sp: &SimilarityComponent,
    codec: &FixedPointCodec,
) -> Result<Ciphertext> {
    if blinded.len() != w_sp.len() {
        return Err(SimilarityError::Length {
            expected: blinded.len(),
            found: w_sp.len(),
        });
    }
    if blinded.is_empty() {
        return Err(SimilarityError::DegenerateWeights);
    }
    codec.check_similarity_budget(blinded.len(), blinded.blind_bits)?;
    let terms = blinded
        .ciphers
        .iter()
        .zip(w_sp.values())
        .map(|(c, &w)| Ok(pk.scalar_mul(c, &codec.encode(w)?)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(pk.sum(&terms)?.expect("non-empty component"))
}

pub fn unblind(blinded_score: f64, l: &BlindingFactor) -> SimilarityScore {
    SimilarityScore(blinded_score / l.value() as f64)
}
