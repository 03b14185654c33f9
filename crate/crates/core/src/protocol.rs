//! Round protocol between the model initiator, participants and the server.
//!
//! Every message crosses role boundaries as bytes in the wire format below,
//! even in-process. Parties share the Paillier private key; the server holds
//! only the public key, ciphertexts, blinding factors and unblinded scores.
//!
//! Wire layout (big-endian): `u32 total_len | u8 version | u8 tag | u32 round |
//! u32 sender | payload`. Ciphertext vectors are `u32 count | u64 key_id` then
//! one length-prefixed magnitude per element; reals are IEEE-754 bit patterns.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PartyRole, ShardMap};
use crate::fixed_point::{CodecError, FixedPointCodec};
use crate::ml::{evaluate, train_local, Evaluation, MlError, ModelParams, ModelSpec, TrainConfig};
use crate::paillier::{Ciphertext, KeyId, PaillierError, PrivateKey, PublicKey};
use crate::similarity::{
    blind_component, compute_blinded_score, decrypt_values, encrypt_component, encrypt_values,
    normalize_weights, unblind, BlindedComponent, BlindingFactor, SimilarityError,
};
use crate::wire::{ByteReader, ByteWriter, WireError};

pub const WIRE_VERSION: u8 = 1;
pub const INITIATOR_ID: u32 = 0;
pub const SERVER_ID: u32 = u32::MAX;

const TAG_INIT: u8 = 1;
const TAG_GLOBAL: u8 = 2;
const TAG_INITIATOR_UPDATE: u8 = 3;
const TAG_CHALLENGE: u8 = 4;
const TAG_PARTICIPANT_UPDATE: u8 = 5;

const AGG_SUM: u8 = 0;
const AGG_DIVIDED: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("protocol order violated: {0}")]
    Order(String),
    #[error("expected a {expected} message, got {found}")]
    UnexpectedMessage {
        expected: &'static str,
        found: &'static str,
    },
    #[error("message for round {found}, expected round {expected}")]
    Round { expected: u32, found: u32 },
    #[error("vector of length {found}, expected {expected}")]
    Length { expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Paillier(#[from] PaillierError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Ml(#[from] MlError),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

/// How the server folds accepted weights into the next global vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `E(W_add)` is sent as is; receivers divide by the included count after decoding.
    Sum,
    /// `E(W_add)^((P+1)^-1 mod n)`; exact only when the encoded sum is divisible by `P+1`.
    ModularInverse,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    InitParams {
        weights: Vec<Ciphertext>,
    },
    GlobalParams {
        weights: Vec<Ciphertext>,
        included_count: u32,
        aggregation: Aggregation,
    },
    InitiatorUpdate {
        weights: Vec<Ciphertext>,
        component: Vec<Ciphertext>,
    },
    BlindChallenge {
        component: Vec<Ciphertext>,
        blind_bits: u32,
    },
    ParticipantUpdate {
        weights: Vec<Ciphertext>,
        blinded_score: f64,
    },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::InitParams { .. } => "InitParams",
            Payload::GlobalParams { .. } => "GlobalParams",
            Payload::InitiatorUpdate { .. } => "InitiatorUpdate",
            Payload::BlindChallenge { .. } => "BlindChallenge",
            Payload::ParticipantUpdate { .. } => "ParticipantUpdate",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Payload::InitParams { .. } => TAG_INIT,
            Payload::GlobalParams { .. } => TAG_GLOBAL,
            Payload::InitiatorUpdate { .. } => TAG_INITIATOR_UPDATE,
            Payload::BlindChallenge { .. } => TAG_CHALLENGE,
            Payload::ParticipantUpdate { .. } => TAG_PARTICIPANT_UPDATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub round: u32,
    pub sender: u32,
    pub payload: Payload,
}

fn write_ciphers(w: &mut ByteWriter, v: &[Ciphertext]) {
    w.u32(v.len() as u32);
    w.u64(v.first().map_or(0, |c| c.key_id().0));
    for c in v {
        w.biguint(c.value());
    }
}

fn read_ciphers(r: &mut ByteReader<'_>) -> std::result::Result<Vec<Ciphertext>, WireError> {
    let count = r.u32()? as usize;
    let key = KeyId(r.u64()?);
    if count > r.remaining() / 4 {
        return Err(WireError::Invalid(format!(
            "ciphertext count {count} exceeds the message size"
        )));
    }
    (0..count)
        .map(|_| Ok(Ciphertext::from_raw(r.biguint()?, key)))
        .collect()
}

impl RoundMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u8(WIRE_VERSION);
        w.u8(self.payload.tag());
        w.u32(self.round);
        w.u32(self.sender);
        match &self.payload {
            Payload::InitParams { weights } => write_ciphers(&mut w, weights),
            Payload::GlobalParams {
                weights,
                included_count,
                aggregation,
            } => {
                w.u8(match aggregation {
                    Aggregation::Sum => AGG_SUM,
                    Aggregation::ModularInverse => AGG_DIVIDED,
                });
                w.u32(*included_count);
                write_ciphers(&mut w, weights);
            }
            Payload::InitiatorUpdate { weights, component } => {
                write_ciphers(&mut w, weights);
                write_ciphers(&mut w, component);
            }
            Payload::BlindChallenge {
                component,
                blind_bits,
            } => {
                w.u32(*blind_bits);
                write_ciphers(&mut w, component);
            }
            Payload::ParticipantUpdate {
                weights,
                blinded_score,
            } => {
                write_ciphers(&mut w, weights);
                w.f64(*blinded_score);
            }
        }
        let body = w.into_inner();
        let mut out = Vec::with_capacity(body.len() + 4);
        out.extend_from_slice(&((body.len() + 4) as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, WireError> {
        let mut r = ByteReader::new(bytes);
        let total = r.u32()? as usize;
        if total != bytes.len() {
            return Err(WireError::Invalid(format!(
                "length prefix {total} does not match {} bytes",
                bytes.len()
            )));
        }
        let version = r.u8()?;
        if version != WIRE_VERSION {
            return Err(WireError::Invalid(format!(
                "unsupported wire version {version}"
            )));
        }
        let tag = r.u8()?;
        let round = r.u32()?;
        let sender = r.u32()?;
        let payload = match tag {
            TAG_INIT => Payload::InitParams {
                weights: read_ciphers(&mut r)?,
            },
            TAG_GLOBAL => {
                let aggregation = match r.u8()? {
                    AGG_SUM => Aggregation::Sum,
                    AGG_DIVIDED => Aggregation::ModularInverse,
                    other => {
                        return Err(WireError::Invalid(format!(
                            "unknown aggregation mode {other}"
                        )))
                    }
                };
                let included_count = r.u32()?;
                Payload::GlobalParams {
                    weights: read_ciphers(&mut r)?,
                    included_count,
                    aggregation,
                }
            }
            TAG_INITIATOR_UPDATE => Payload::InitiatorUpdate {
                weights: read_ciphers(&mut r)?,
                component: read_ciphers(&mut r)?,
            },
            TAG_CHALLENGE => {
                let blind_bits = r.u32()?;
                Payload::BlindChallenge {
                    component: read_ciphers(&mut r)?,
                    blind_bits,
                }
            }
            TAG_PARTICIPANT_UPDATE => Payload::ParticipantUpdate {
                weights: read_ciphers(&mut r)?,
                blinded_score: r.f64()?,
            },
            other => return Err(WireError::Invalid(format!("unknown message tag {other}"))),
        };
        r.finish()?;
        Ok(RoundMessage {
            round,
            sender,
            payload,
        })
    }
}

/// Per-round inclusion threshold `T`; a participant is kept iff its score is strictly above it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdSchedule {
    Fixed {
        value: f64,
    },
    /// `start + step * floor((round - 1) / rounds_per_step)`, capped at `end`.
    Stepped {
        start: f64,
        end: f64,
        step: f64,
        rounds_per_step: u32,
    },
    /// `T = -1`: every participant with a valid score is included.
    Disabled,
}

impl ThresholdSchedule {
    pub fn validate(&self) -> Result<()> {
        let in_range = |t: f64| t > -1.0 && t < 1.0;
        match *self {
            ThresholdSchedule::Fixed { value } if !in_range(value) => Err(ProtocolError::Config(
                format!("threshold {value} must lie in (-1, 1)"),
            )),
            ThresholdSchedule::Stepped {
                start,
                end,
                step,
                rounds_per_step,
            } => {
                if !in_range(start) || !in_range(end) {
                    return Err(ProtocolError::Config(format!(
                        "stepped thresholds {start}..{end} must lie in (-1, 1)"
                    )));
                }
                if start > end || step.is_nan() || step < 0.0 {
                    return Err(ProtocolError::Config(
                        "stepped threshold must be nondecreasing".into(),
                    ));
                }
                if rounds_per_step == 0 {
                    return Err(ProtocolError::Config(
                        "rounds_per_step must be positive".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Threshold in force for 1-based `round`.
    pub fn threshold(&self, round: u32) -> f64 {
        match *self {
            ThresholdSchedule::Fixed { value } => value,
            ThresholdSchedule::Stepped {
                start,
                end,
                step,
                rounds_per_step,
            } => {
                let steps = round.saturating_sub(1) / rounds_per_step.max(1);
                (start + step * steps as f64).min(end)
            }
            ThresholdSchedule::Disabled => -1.0,
        }
    }
}

/// Strict inclusion test; NaN scores never pass.
pub fn passes_threshold(score: f64, threshold: f64) -> bool {
    score > threshold
}

/// Independent seed for `stream` derived from `base` (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Decrypts a global update into the averaged weight vector.
pub fn decode_global(
    sk: &PrivateKey,
    codec: &FixedPointCodec,
    weights: &[Ciphertext],
    included_count: u32,
    aggregation: Aggregation,
) -> Result<Vec<f64>> {
    let sum = decrypt_values(sk, weights, codec, 1)?;
    Ok(match aggregation {
        Aggregation::Sum => {
            let k = f64::from(included_count.max(1));
            sum.into_iter().map(|v| v / k).collect()
        }
        Aggregation::ModularInverse => sum,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Adversary {
    /// Uploads Gaussian noise of the given scale instead of trained weights.
    RandomWeights { scale: f64 },
    /// Never answers the server.
    Silent,
}

/// Seconds spent in each step of a party's round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PartyTiming {
    pub train: f64,
    pub encrypt_weights: f64,
    /// Initiator: encrypting the similarity component. Participant: the
    /// homomorphic inner product plus decryption of the blinded score.
    pub similarity: f64,
}

/// State and keys common to the initiator and participants.
#[derive(Debug)]
struct PartyCore {
    id: u32,
    spec: ModelSpec,
    train: TrainConfig,
    data: Dataset,
    sk: PrivateKey,
    pk: PublicKey,
    codec: FixedPointCodec,
    train_rng: ChaCha20Rng,
    crypto_rng: ChaCha20Rng,
    next_round: u32,
    timing: PartyTiming,
}

impl PartyCore {
    fn new(
        id: u32,
        spec: ModelSpec,
        train: TrainConfig,
        data: Dataset,
        sk: PrivateKey,
        scale_bits: u32,
        seeds: PartySeeds,
    ) -> Result<Self> {
        spec.validate()?;
        train.validate()?;
        if data.is_empty() {
            return Err(ProtocolError::Config(format!("party {id} has no data")));
        }
        let pk = sk.public_key();
        let codec = FixedPointCodec::for_key(&pk, scale_bits)?;
        Ok(PartyCore {
            id,
            spec,
            train,
            data,
            sk,
            pk,
            codec,
            train_rng: ChaCha20Rng::seed_from_u64(seeds.train),
            crypto_rng: ChaCha20Rng::seed_from_u64(seeds.crypto),
            next_round: 1,
            timing: PartyTiming::default(),
        })
    }

    fn open_global(&mut self, msg: &RoundMessage) -> Result<ModelParams> {
        let Payload::GlobalParams {
            weights,
            included_count,
            aggregation,
        } = &msg.payload
        else {
            return Err(ProtocolError::UnexpectedMessage {
                expected: "GlobalParams",
                found: msg.payload.kind(),
            });
        };
        if msg.round != self.next_round {
            return Err(ProtocolError::Round {
                expected: self.next_round,
                found: msg.round,
            });
        }
        let flat = decode_global(
            &self.sk,
            &self.codec,
            weights,
            *included_count,
            *aggregation,
        )?;
        let n = self.spec.param_count();
        if flat.len() != n {
            return Err(ProtocolError::Length {
                expected: n,
                found: flat.len(),
            });
        }
        Ok(ModelParams::from_flat(&self.spec, flat)?)
    }

    fn train_from(&mut self, global: &ModelParams) -> Result<ModelParams> {
        let t = Instant::now();
        let w = train_local(
            &self.spec,
            global,
            &self.data,
            &self.train,
            &mut self.train_rng,
        )?;
        self.timing.train = t.elapsed().as_secs_f64();
        Ok(w)
    }

    fn encrypt_weights(&mut self, w: &[f64]) -> Result<Vec<Ciphertext>> {
        let t = Instant::now();
        let c = encrypt_values(&self.pk, w, &self.codec, &mut self.crypto_rng)?;
        self.timing.encrypt_weights = t.elapsed().as_secs_f64();
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartySeeds {
    pub train: u64,
    pub crypto: u64,
}

impl PartySeeds {
    pub fn derive(init_seed: u64, crypto_seed: u64, party: u32) -> Self {
        PartySeeds {
            train: derive_seed(init_seed, u64::from(party) + 1),
            crypto: derive_seed(crypto_seed, u64::from(party) + 1),
        }
    }
}

/// The model initiator: sets `W_init` and anchors every similarity score.
#[derive(Debug)]
pub struct Initiator {
    core: PartyCore,
    w_init: Option<ModelParams>,
    last_weights: Option<ModelParams>,
}

impl Initiator {
    pub fn new(
        spec: ModelSpec,
        train: TrainConfig,
        data: Dataset,
        sk: PrivateKey,
        scale_bits: u32,
        seeds: PartySeeds,
    ) -> Result<Self> {
        Ok(Initiator {
            core: PartyCore::new(INITIATOR_ID, spec, train, data, sk, scale_bits, seeds)?,
            w_init: None,
            last_weights: None,
        })
    }

    /// Draws and encrypts `W_init`. Runs once per training run.
    pub fn initiator_init<R: Rng + ?Sized>(&mut self, init_rng: &mut R) -> Result<Vec<u8>> {
        if self.w_init.is_some() {
            return Err(ProtocolError::Order(
                "initialization already performed".into(),
            ));
        }
        let w = ModelParams::init(&self.core.spec, init_rng);
        let weights = self.core.encrypt_weights(w.as_slice())?;
        self.w_init = Some(w);
        Ok(RoundMessage {
            round: 0,
            sender: INITIATOR_ID,
            payload: Payload::InitParams { weights },
        }
        .encode())
    }

    /// Decrypts the global update, trains locally and uploads `E(W_o)` and `E(W_so)`.
    pub fn initiator_round(&mut self, global: &[u8]) -> Result<Vec<u8>> {
        if self.w_init.is_none() {
            return Err(ProtocolError::Order("initiator_init has not run".into()));
        }
        let msg = RoundMessage::decode(global)?;
        let start = self.core.open_global(&msg)?;
        let w_o = self.core.train_from(&start)?;
        let w_so = normalize_weights(w_o.as_slice())?;
        let weights = self.core.encrypt_weights(w_o.as_slice())?;
        let t = Instant::now();
        let component = encrypt_component(
            &self.core.pk,
            &w_so,
            &self.core.codec,
            &mut self.core.crypto_rng,
        )?;
        self.core.timing.similarity = t.elapsed().as_secs_f64();
        self.core.next_round += 1;
        self.last_weights = Some(w_o);
        Ok(RoundMessage {
            round: msg.round,
            sender: INITIATOR_ID,
            payload: Payload::InitiatorUpdate { weights, component },
        }
        .encode())
    }

    pub fn w_init(&self) -> Option<&ModelParams> {
        self.w_init.as_ref()
    }

    /// Locally trained `W_o` from the latest round.
    pub fn last_weights(&self) -> Option<&ModelParams> {
        self.last_weights.as_ref()
    }

    pub fn timing(&self) -> PartyTiming {
        self.core.timing
    }

    pub fn codec(&self) -> &FixedPointCodec {
        &self.core.codec
    }
}

/// Header of a message a participant received; kept to audit information flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceivedMessage {
    pub round: u32,
    pub sender: u32,
    pub kind: &'static str,
}

#[derive(Debug)]
pub struct Participant {
    core: PartyCore,
    adversary: Option<Adversary>,
    received: Vec<ReceivedMessage>,
    pending: Option<PendingUpdate>,
    last_weights: Option<ModelParams>,
}

#[derive(Debug)]
struct PendingUpdate {
    round: u32,
    weights: Vec<Ciphertext>,
    w_sp: crate::similarity::SimilarityComponent,
}

impl Participant {
    pub fn new(
        id: u32,
        spec: ModelSpec,
        train: TrainConfig,
        data: Dataset,
        sk: PrivateKey,
        scale_bits: u32,
        seeds: PartySeeds,
    ) -> Result<Self> {
        if id == INITIATOR_ID || id == SERVER_ID {
            return Err(ProtocolError::Config(format!(
                "participant id {id} is reserved"
            )));
        }
        Ok(Participant {
            core: PartyCore::new(id, spec, train, data, sk, scale_bits, seeds)?,
            adversary: None,
            received: Vec::new(),
            pending: None,
            last_weights: None,
        })
    }

    pub fn with_adversary(mut self, adversary: Option<Adversary>) -> Self {
        self.adversary = adversary;
        self
    }

    pub fn id(&self) -> u32 {
        self.core.id
    }

    pub fn adversary(&self) -> Option<Adversary> {
        self.adversary
    }

    /// First half of a round: decrypt the global update, train, encrypt `W_p`.
    pub fn prepare(&mut self, global: &[u8]) -> Result<()> {
        let msg = RoundMessage::decode(global)?;
        self.log(&msg);
        let start = self.core.open_global(&msg)?;
        let w_p = match self.adversary {
            Some(Adversary::RandomWeights { scale }) => {
                let flat = (0..start.len())
                    .map(|_| scale * self.core.train_rng.sample::<f64, _>(StandardNormal))
                    .collect();
                ModelParams::from_flat(&self.core.spec, flat)?
            }
            _ => self.core.train_from(&start)?,
        };
        let w_sp = normalize_weights(w_p.as_slice())?;
        let weights = self.core.encrypt_weights(w_p.as_slice())?;
        self.pending = Some(PendingUpdate {
            round: msg.round,
            weights,
            w_sp,
        });
        self.core.next_round += 1;
        self.last_weights = Some(w_p);
        Ok(())
    }

    /// Second half: fold `W_sp` into the blinded component and decrypt `S * l`.
    pub fn respond(&mut self, challenge: &[u8]) -> Result<Vec<u8>> {
        let msg = RoundMessage::decode(challenge)?;
        self.log(&msg);
        let Payload::BlindChallenge {
            component,
            blind_bits,
        } = msg.payload
        else {
            return Err(ProtocolError::UnexpectedMessage {
                expected: "BlindChallenge",
                found: msg.payload.kind(),
            });
        };
        let pending = self
            .pending
            .take()
            .ok_or_else(|| ProtocolError::Order("challenge before global update".into()))?;
        if msg.round != pending.round {
            return Err(ProtocolError::Round {
                expected: pending.round,
                found: msg.round,
            });
        }
        let t = Instant::now();
        let blinded = BlindedComponent {
            ciphers: component,
            blind_bits,
        };
        let c = compute_blinded_score(&self.core.pk, &blinded, &pending.w_sp, &self.core.codec)?;
        let blinded_score = self.core.codec.decode(&self.core.sk.decrypt(&c)?, 2)?;
        self.core.timing.similarity = t.elapsed().as_secs_f64();
        Ok(RoundMessage {
            round: pending.round,
            sender: self.core.id,
            payload: Payload::ParticipantUpdate {
                weights: pending.weights,
                blinded_score,
            },
        }
        .encode())
    }

    pub fn participant_round(&mut self, global: &[u8], challenge: &[u8]) -> Result<Vec<u8>> {
        self.prepare(global)?;
        self.respond(challenge)
    }

    fn log(&mut self, msg: &RoundMessage) {
        self.received.push(ReceivedMessage {
            round: msg.round,
            sender: msg.sender,
            kind: msg.payload.kind(),
        });
    }

    pub fn received(&self) -> &[ReceivedMessage] {
        &self.received
    }

    pub fn last_weights(&self) -> Option<&ModelParams> {
        self.last_weights.as_ref()
    }

    pub fn timing(&self) -> PartyTiming {
        self.core.timing
    }
}

/// Transport from the server to the participants for one challenge/response exchange.
pub trait ParticipantLink {
    /// Ids the server waits for.
    fn expected(&self) -> Vec<u32>;
    /// Broadcasts `challenge` and returns whatever replies arrive before the barrier closes.
    fn exchange(&mut self, challenge: &[u8]) -> Vec<Vec<u8>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreStatus {
    Included,
    Excluded,
    /// No valid reply before the barrier timeout.
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub round: u32,
    pub party_id: u32,
    pub score: Option<f64>,
    pub status: ScoreStatus,
}

impl ScoreEntry {
    pub fn included(&self) -> bool {
        self.status == ScoreStatus::Included
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: u32,
    pub threshold: f64,
    pub scores: Vec<ScoreEntry>,
    pub included_count: u32,
    /// Seconds spent blinding the initiator's component.
    pub blinding_seconds: f64,
    pub rejected_replies: Vec<String>,
}

/// The honest-but-curious aggregator. Holds no private key and never sees a
/// plaintext weight; serializing it is how tests audit that.
#[derive(Debug, Serialize)]
pub struct ServerState {
    pk: PublicKey,
    param_count: usize,
    round: u32,
    global: Vec<Ciphertext>,
    included_count: u32,
    aggregation: Aggregation,
    schedule: ThresholdSchedule,
    blind_bits: u32,
    blind: Option<BlindingFactor>,
    score_log: Vec<ScoreEntry>,
    #[serde(skip)]
    rng: ChaCha20Rng,
}

impl ServerState {
    pub fn new(
        pk: PublicKey,
        param_count: usize,
        schedule: ThresholdSchedule,
        blind_bits: u32,
        aggregation: Aggregation,
        seed: u64,
    ) -> Result<Self> {
        schedule.validate()?;
        BlindingFactor::new(2, blind_bits)?;
        Ok(ServerState {
            pk,
            param_count,
            round: 0,
            global: Vec::new(),
            included_count: 0,
            aggregation,
            schedule,
            blind_bits,
            blind: None,
            score_log: Vec::new(),
            rng: ChaCha20Rng::seed_from_u64(seed),
        })
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn score_log(&self) -> &[ScoreEntry] {
        &self.score_log
    }

    pub fn schedule(&self) -> &ThresholdSchedule {
        &self.schedule
    }

    fn check_vector(&self, v: &[Ciphertext]) -> Result<()> {
        if v.len() != self.param_count {
            return Err(ProtocolError::Length {
                expected: self.param_count,
                found: v.len(),
            });
        }
        if let Some(c) = v.iter().find(|c| c.key_id() != self.pk.id()) {
            return Err(PaillierError::KeyMismatch {
                expected: self.pk.id().0,
                found: c.key_id().0,
            }
            .into());
        }
        Ok(())
    }

    fn global_message(&self) -> Vec<u8> {
        RoundMessage {
            round: self.round + 1,
            sender: SERVER_ID,
            payload: Payload::GlobalParams {
                weights: self.global.clone(),
                included_count: self.included_count,
                aggregation: self.aggregation,
            },
        }
        .encode()
    }

    /// Stores `E(W_init)` as the first global vector and returns it for download.
    pub fn accept_init(&mut self, msg: &[u8]) -> Result<Vec<u8>> {
        if !self.global.is_empty() {
            return Err(ProtocolError::Order("server already initialized".into()));
        }
        let msg = RoundMessage::decode(msg)?;
        let Payload::InitParams { weights } = msg.payload else {
            return Err(ProtocolError::UnexpectedMessage {
                expected: "InitParams",
                found: msg.payload.kind(),
            });
        };
        if msg.sender != INITIATOR_ID {
            return Err(ProtocolError::Order(format!(
                "initial parameters from party {}",
                msg.sender
            )));
        }
        self.check_vector(&weights)?;
        self.global = weights;
        // A single contributor; in modular-inverse mode the vector is already final.
        self.included_count = 1;
        Ok(self.global_message())
    }

    /// One server round: blind the initiator's component, run the challenge
    /// exchange, unblind and filter scores, and aggregate the accepted weights.
    pub fn server_round(
        &mut self,
        initiator_msg: &[u8],
        link: &mut dyn ParticipantLink,
    ) -> Result<(Vec<u8>, RoundOutcome)> {
        if self.global.is_empty() {
            return Err(ProtocolError::Order(
                "server has no initial parameters".into(),
            ));
        }
        let round = self.round + 1;
        let msg = RoundMessage::decode(initiator_msg)?;
        let Payload::InitiatorUpdate { weights, component } = msg.payload else {
            return Err(ProtocolError::UnexpectedMessage {
                expected: "InitiatorUpdate",
                found: msg.payload.kind(),
            });
        };
        if msg.round != round {
            return Err(ProtocolError::Round {
                expected: round,
                found: msg.round,
            });
        }
        if msg.sender != INITIATOR_ID {
            return Err(ProtocolError::Order(format!(
                "initiator update from party {}",
                msg.sender
            )));
        }
        self.check_vector(&weights)?;
        self.check_vector(&component)?;

        let l = BlindingFactor::sample(self.blind_bits, &mut self.rng)?;
        self.blind = Some(l);
        let t = Instant::now();
        let blinded = blind_component(&self.pk, &component, &l)?;
        let blinding_seconds = t.elapsed().as_secs_f64();
        let challenge = RoundMessage {
            round,
            sender: SERVER_ID,
            payload: Payload::BlindChallenge {
                component: blinded.ciphers,
                blind_bits: blinded.blind_bits,
            },
        }
        .encode();

        let expected: BTreeSet<u32> = link.expected().into_iter().collect();
        let mut replies: BTreeMap<u32, (Vec<Ciphertext>, f64)> = BTreeMap::new();
        let mut rejected = Vec::new();
        for raw in link.exchange(&challenge) {
            match self.parse_reply(&raw, round, &expected) {
                Ok((id, w, s)) if !replies.contains_key(&id) => {
                    replies.insert(id, (w, s));
                }
                Ok((id, _, _)) => rejected.push(format!("duplicate reply from party {id}")),
                Err(e) => rejected.push(e.to_string()),
            }
        }

        let threshold = self.schedule.threshold(round);
        let mut acc = weights;
        let mut included_count = 1u32;
        let mut scores = Vec::with_capacity(expected.len());
        for &id in &expected {
            let entry = match replies.remove(&id) {
                None => ScoreEntry {
                    round,
                    party_id: id,
                    score: None,
                    status: ScoreStatus::Dropped,
                },
                Some((w_p, blinded_score)) => {
                    let score = unblind(blinded_score, &l).value();
                    let status = if passes_threshold(score, threshold) {
                        for (a, c) in acc.iter_mut().zip(&w_p) {
                            *a = self.pk.add(a, c)?;
                        }
                        included_count += 1;
                        ScoreStatus::Included
                    } else {
                        ScoreStatus::Excluded
                    };
                    ScoreEntry {
                        round,
                        party_id: id,
                        score: Some(score),
                        status,
                    }
                }
            };
            scores.push(entry);
        }

        if self.aggregation == Aggregation::ModularInverse {
            let inv = BigUint::from(included_count)
                .modinv(self.pk.n())
                .ok_or_else(|| {
                    ProtocolError::Config("included count shares a factor with n".into())
                })?;
            acc = acc
                .iter()
                .map(|c| self.pk.scalar_mul(c, &inv))
                .collect::<std::result::Result<_, _>>()?;
        }
        self.global = acc;
        self.included_count = included_count;
        self.round = round;
        self.score_log.extend(scores.iter().cloned());
        let outcome = RoundOutcome {
            round,
            threshold,
            scores,
            included_count,
            blinding_seconds,
            rejected_replies: rejected,
        };
        Ok((self.global_message(), outcome))
    }

    fn parse_reply(
        &self,
        raw: &[u8],
        round: u32,
        expected: &BTreeSet<u32>,
    ) -> Result<(u32, Vec<Ciphertext>, f64)> {
        let msg = RoundMessage::decode(raw)?;
        if !expected.contains(&msg.sender) {
            return Err(ProtocolError::Order(format!(
                "reply from unexpected party {}",
                msg.sender
            )));
        }
        if msg.round != round {
            return Err(ProtocolError::Round {
                expected: round,
                found: msg.round,
            });
        }
        let Payload::ParticipantUpdate {
            weights,
            blinded_score,
        } = msg.payload
        else {
            return Err(ProtocolError::UnexpectedMessage {
                expected: "ParticipantUpdate",
                found: msg.payload.kind(),
            });
        };
        self.check_vector(&weights)?;
        Ok((msg.sender, weights, blinded_score))
    }
}

/// Channel-backed link: one challenge queue per participant thread and a
/// shared reply queue drained until every participant answered or the barrier times out.
struct ThreadLink {
    ids: Vec<u32>,
    challenge_tx: Vec<mpsc::Sender<Arc<Vec<u8>>>>,
    reply_rx: mpsc::Receiver<Vec<u8>>,
    timeout: Duration,
}

impl ParticipantLink for ThreadLink {
    fn expected(&self) -> Vec<u32> {
        self.ids.clone()
    }

    fn exchange(&mut self, challenge: &[u8]) -> Vec<Vec<u8>> {
        let shared = Arc::new(challenge.to_vec());
        for tx in &self.challenge_tx {
            // A participant that already failed has dropped its receiver.
            let _ = tx.send(Arc::clone(&shared));
        }
        self.challenge_tx.clear();
        let deadline = Instant::now() + self.timeout;
        let mut out = Vec::new();
        while out.len() < self.ids.len() {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.reply_rx.recv_timeout(left) {
                Ok(m) => out.push(m),
                Err(_) => break,
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauRule {
    /// Rounds without sufficient improvement before stopping.
    pub patience: u32,
    /// Smallest decrease in the initiator's test error that counts as improvement.
    pub min_delta: f64,
}

/// Everything [`run_training`] needs; the harness builds it from a config file.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub shards: ShardMap,
    pub sk: PrivateKey,
    pub scale_bits: u32,
    pub blind_bits: u32,
    pub schedule: ThresholdSchedule,
    pub max_rounds: u32,
    pub plateau: Option<PlateauRule>,
    pub init_seed: u64,
    pub crypto_seed: u64,
    pub aggregation: Aggregation,
    pub adversaries: BTreeMap<u32, Adversary>,
    pub barrier_timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartyEvaluation {
    pub party_id: u32,
    pub label: String,
    pub role: PartyRole,
    pub test_error: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub initiator_train: f64,
    pub initiator_encrypt: f64,
    /// Encryption of the initiator's similarity component.
    pub initiator_similarity: f64,
    /// Slowest participant's local training.
    pub participant_train: f64,
    /// Mean participant inner product plus score decryption.
    pub participant_similarity: f64,
    pub server_blinding: f64,
    pub round_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub threshold: f64,
    pub scores: Vec<ScoreEntry>,
    pub included_count: u32,
    /// Decoded global parameters after this round's aggregation.
    pub global: Vec<f64>,
    pub parties: Vec<PartyEvaluation>,
    /// Global model on the pooled clean test set.
    pub pooled: Evaluation,
    pub timings: PhaseTimings,
    pub party_errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub param_count: usize,
    /// Decoded `W_init` as every party sees it.
    pub initial_global: Vec<f64>,
    pub initial: Evaluation,
    pub rounds: Vec<RoundRecord>,
    pub stopped_early: bool,
}

impl RunReport {
    pub fn final_evaluation(&self) -> Evaluation {
        self.rounds.last().map_or(self.initial, |r| r.pooled)
    }

    pub fn final_global(&self) -> &[f64] {
        self.rounds
            .last()
            .map_or(&self.initial_global, |r| &r.global)
    }
}

fn evaluate_parties(
    spec: &ModelSpec,
    params: &ModelParams,
    shards: &ShardMap,
) -> Result<Vec<PartyEvaluation>> {
    shards
        .parties
        .iter()
        .filter(|p| !p.test.is_empty())
        .map(|p| {
            let e = evaluate(spec, params, &p.test)?;
            Ok(PartyEvaluation {
                party_id: p.id,
                label: p.label(),
                role: p.role,
                test_error: e.test_error,
                accuracy: e.accuracy,
            })
        })
        .collect()
}

/// Runs the synchronous protocol for up to `max_rounds` rounds. Parties train
/// and compute in parallel; the server waits at a barrier for participant replies.
pub fn run_training(setup: &RunSetup) -> Result<RunReport> {
    let spec = &setup.spec;
    let pk = setup.sk.public_key();
    let param_count = spec.param_count();
    let codec = FixedPointCodec::for_key(&pk, setup.scale_bits)?;
    codec.check_similarity_budget(param_count, setup.blind_bits)?;
    setup.schedule.validate()?;
    let pooled = setup
        .shards
        .pooled_clean_test()
        .map_err(|e| ProtocolError::Config(e.to_string()))?;
    if pooled.is_empty() {
        return Err(ProtocolError::Config(
            "no clean test data to evaluate on".into(),
        ));
    }

    let init_shard = setup.shards.initiator();
    let mut initiator = Initiator::new(
        spec.clone(),
        setup.train.clone(),
        init_shard.train.clone(),
        setup.sk.clone(),
        setup.scale_bits,
        PartySeeds::derive(setup.init_seed, setup.crypto_seed, INITIATOR_ID),
    )?;
    let mut participants = setup
        .shards
        .participants()
        .iter()
        .map(|p| {
            Participant::new(
                p.id,
                spec.clone(),
                setup.train.clone(),
                p.train.clone(),
                setup.sk.clone(),
                setup.scale_bits,
                PartySeeds::derive(setup.init_seed, setup.crypto_seed, p.id),
            )
            .map(|part| part.with_adversary(setup.adversaries.get(&p.id).copied()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut server = ServerState::new(
        pk.clone(),
        param_count,
        setup.schedule.clone(),
        setup.blind_bits,
        setup.aggregation,
        derive_seed(setup.crypto_seed, u64::from(SERVER_ID)),
    )?;

    let mut init_rng = ChaCha20Rng::seed_from_u64(derive_seed(setup.init_seed, 0));
    let init_msg = initiator.initiator_init(&mut init_rng)?;
    let mut global = server.accept_init(&init_msg)?;
    let opened = open_for_evaluation(&setup.sk, &codec, &global)?;
    let initial = evaluate(
        spec,
        &ModelParams::from_flat(spec, opened.clone())?,
        &pooled,
    )?;
    let mut report = RunReport {
        param_count,
        initial_global: opened,
        initial,
        rounds: Vec::new(),
        stopped_early: false,
    };

    let mut best = f64::INFINITY;
    let mut stale = 0u32;
    for _ in 0..setup.max_rounds {
        let t_round = Instant::now();
        let (next, outcome, party_errors) = run_round(
            &mut initiator,
            &mut participants,
            &mut server,
            &global,
            setup,
        )?;
        global = next;

        let flat = open_for_evaluation(&setup.sk, &codec, &global)?;
        let params = ModelParams::from_flat(spec, flat)?;
        let parties = evaluate_parties(spec, &params, &setup.shards)?;
        let pooled_eval = evaluate(spec, &params, &pooled)?;

        let it = initiator.timing();
        let answered: Vec<PartyTiming> = participants
            .iter()
            .filter(|p| {
                outcome
                    .scores
                    .iter()
                    .any(|s| s.party_id == p.id() && s.score.is_some())
            })
            .map(Participant::timing)
            .collect();
        let timings = PhaseTimings {
            initiator_train: it.train,
            initiator_encrypt: it.encrypt_weights,
            initiator_similarity: it.similarity,
            participant_train: answered.iter().map(|t| t.train).fold(0.0, f64::max),
            participant_similarity: if answered.is_empty() {
                0.0
            } else {
                answered.iter().map(|t| t.similarity).sum::<f64>() / answered.len() as f64
            },
            server_blinding: outcome.blinding_seconds,
            round_total: t_round.elapsed().as_secs_f64(),
        };

        let initiator_error = parties
            .iter()
            .find(|p| p.party_id == INITIATOR_ID)
            .map_or(pooled_eval.test_error, |p| p.test_error);
        report.rounds.push(RoundRecord {
            round: outcome.round,
            threshold: outcome.threshold,
            scores: outcome.scores,
            included_count: outcome.included_count,
            global: params.into_flat(),
            parties,
            pooled: pooled_eval,
            timings,
            party_errors,
        });

        if let Some(rule) = setup.plateau {
            if initiator_error < best - rule.min_delta {
                best = initiator_error;
                stale = 0;
            } else {
                stale += 1;
                if stale >= rule.patience {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(report)
}

fn open_for_evaluation(
    sk: &PrivateKey,
    codec: &FixedPointCodec,
    global: &[u8],
) -> Result<Vec<f64>> {
    let msg = RoundMessage::decode(global)?;
    match msg.payload {
        Payload::GlobalParams {
            weights,
            included_count,
            aggregation,
        } => decode_global(sk, codec, &weights, included_count, aggregation),
        other => Err(ProtocolError::UnexpectedMessage {
            expected: "GlobalParams",
            found: other.kind(),
        }),
    }
}

/// One synchronous round with every party on its own thread.
fn run_round(
    initiator: &mut Initiator,
    participants: &mut [Participant],
    server: &mut ServerState,
    global: &[u8],
    setup: &RunSetup,
) -> Result<(Vec<u8>, RoundOutcome, Vec<String>)> {
    let (reply_tx, reply_rx) = mpsc::channel::<Vec<u8>>();
    let mut challenge_tx = Vec::with_capacity(participants.len());
    let mut ids = Vec::with_capacity(participants.len());

    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(participants.len());
        for p in participants.iter_mut() {
            let (tx, rx) = mpsc::channel::<Arc<Vec<u8>>>();
            challenge_tx.push(tx);
            ids.push(p.id());
            let reply_tx = reply_tx.clone();
            handles.push(scope.spawn(move || -> std::result::Result<(), String> {
                let id = p.id();
                p.prepare(global).map_err(|e| format!("party {id}: {e}"))?;
                let challenge = rx
                    .recv()
                    .map_err(|_| format!("party {id}: no challenge received"))?;
                let reply = p
                    .respond(&challenge)
                    .map_err(|e| format!("party {id}: {e}"))?;
                if p.adversary() != Some(Adversary::Silent) {
                    let _ = reply_tx.send(reply);
                }
                Ok(())
            }));
        }
        drop(reply_tx);

        let server_side = (|| -> Result<(Vec<u8>, RoundOutcome)> {
            let update = initiator.initiator_round(global)?;
            let mut link = ThreadLink {
                ids: ids.clone(),
                challenge_tx: std::mem::take(&mut challenge_tx),
                reply_rx,
                timeout: setup.barrier_timeout,
            };
            server.server_round(&update, &mut link)
        })();
        // Unblock participants still waiting if the initiator or server failed.
        challenge_tx.clear();

        let party_errors: Vec<String> = handles
            .into_iter()
            .filter_map(|h| match h.join() {
                Ok(Ok(())) => None,
                Ok(Err(e)) => Some(e),
                Err(_) => Some("participant thread panicked".to_string()),
            })
            .collect();
        server_side.map(|(g, o)| (g, o, party_errors))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paillier::generate_keypair;

    fn key() -> (PublicKey, PrivateKey) {
        generate_keypair(128, &mut ChaCha20Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn wire_round_trip_for_every_tag() {
        let (pk, _) = key();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let ct = |m: u32, rng: &mut ChaCha20Rng| pk.encrypt(&BigUint::from(m), rng).unwrap();
        let v: Vec<Ciphertext> = (0..3).map(|i| ct(i, &mut rng)).collect();
        let payloads = vec![
            Payload::InitParams { weights: v.clone() },
            Payload::GlobalParams {
                weights: v.clone(),
                included_count: 3,
                aggregation: Aggregation::ModularInverse,
            },
            Payload::InitiatorUpdate {
                weights: v.clone(),
                component: v.clone(),
            },
            Payload::BlindChallenge {
                component: v.clone(),
                blind_bits: 20,
            },
            Payload::ParticipantUpdate {
                weights: v.clone(),
                blinded_score: -0.25,
            },
            Payload::InitParams { weights: vec![] },
        ];
        for payload in payloads {
            let m = RoundMessage {
                round: 7,
                sender: 2,
                payload,
            };
            let bytes = m.encode();
            assert_eq!(bytes, m.encode());
            assert_eq!(RoundMessage::decode(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn wire_header_layout() {
        let m = RoundMessage {
            round: 1,
            sender: SERVER_ID,
            payload: Payload::InitParams { weights: vec![] },
        };
        let b = m.encode();
        assert_eq!(&b[..4], &(b.len() as u32).to_be_bytes());
        assert_eq!(b[4], WIRE_VERSION);
        assert_eq!(b[5], TAG_INIT);
        assert_eq!(&b[6..10], &[0, 0, 0, 1]);
        assert_eq!(&b[10..14], &[0xff; 4]);
    }

    #[test]
    fn malformed_messages_are_rejected() {
        let m = RoundMessage {
            round: 1,
            sender: 1,
            payload: Payload::ParticipantUpdate {
                weights: vec![],
                blinded_score: 1.0,
            },
        };
        let good = m.encode();
        assert!(RoundMessage::decode(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(RoundMessage::decode(&bad).is_err());
        let mut bad = good.clone();
        bad[5] = 42;
        assert!(RoundMessage::decode(&bad).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(RoundMessage::decode(&long).is_err());
    }

    #[test]
    fn schedules() {
        let fixed = ThresholdSchedule::Fixed { value: 0.05 };
        assert_eq!(fixed.threshold(1), 0.05);
        assert_eq!(fixed.threshold(500), 0.05);
        let stepped = ThresholdSchedule::Stepped {
            start: 0.1,
            end: 0.7,
            step: 0.1,
            rounds_per_step: 100,
        };
        stepped.validate().unwrap();
        assert_eq!(stepped.threshold(1), 0.1);
        assert_eq!(stepped.threshold(100), 0.1);
        assert!((stepped.threshold(101) - 0.2).abs() < 1e-12);
        assert_eq!(stepped.threshold(10_000), 0.7);
        assert_eq!(ThresholdSchedule::Disabled.threshold(3), -1.0);
        assert!(ThresholdSchedule::Fixed { value: 1.0 }.validate().is_err());
        assert!(ThresholdSchedule::Fixed { value: -1.0 }.validate().is_err());
        assert!(ThresholdSchedule::Stepped {
            start: 0.5,
            end: 0.2,
            step: 0.1,
            rounds_per_step: 1
        }
        .validate()
        .is_err());
    }

    #[test]
    fn strict_threshold() {
        assert!(!passes_threshold(0.05, 0.05));
        assert!(passes_threshold(0.050_000_1, 0.05));
        assert!(!passes_threshold(f64::NAN, -1.0));
        assert!(passes_threshold(-0.99, -1.0));
    }

    #[test]
    fn seeds_are_distinct_per_stream() {
        let a = PartySeeds::derive(1, 2, 0);
        let b = PartySeeds::derive(1, 2, 1);
        assert_ne!(a.train, b.train);
        assert_ne!(a.crypto, b.crypto);
        assert_eq!(a, PartySeeds::derive(1, 2, 0));
        assert_ne!(derive_seed(3, 0), derive_seed(3, 1));
    }
}
