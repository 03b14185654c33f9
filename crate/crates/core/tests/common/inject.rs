//! Server rounds with hand-picked participant replies.

use ppml_core::fixed_point::FixedPointCodec;
use ppml_core::harness::run_keys;
use ppml_core::paillier::{PrivateKey, PublicKey};
use ppml_core::protocol::{
    decode_global, Aggregation, ParticipantLink, Payload, RoundMessage, ScoreStatus, ServerState,
    ThresholdSchedule, INITIATOR_ID,
};
use ppml_core::similarity::encrypt_values;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Replies with chosen similarity scores. It reads `l` off the challenge,
/// which works because the test initiator's component is the first unit vector.
pub struct InjectedLink {
    sk: PrivateKey,
    pk: PublicKey,
    codec: FixedPointCodec,
    replies: Vec<(u32, Option<f64>, Vec<f64>)>,
}

impl ParticipantLink for InjectedLink {
    fn expected(&self) -> Vec<u32> {
        self.replies.iter().map(|r| r.0).collect()
    }

    fn exchange(&mut self, challenge: &[u8]) -> Vec<Vec<u8>> {
        let msg = RoundMessage::decode(challenge).unwrap();
        let Payload::BlindChallenge { component, .. } = msg.payload else {
            panic!("expected a challenge");
        };
        let l = self
            .codec
            .decode(&self.sk.decrypt(&component[0]).unwrap(), 1)
            .unwrap();
        assert_eq!(l.fract(), 0.0);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        self.replies
            .iter()
            .filter_map(|(id, score, w)| {
                let s = (*score)?;
                Some(
                    RoundMessage {
                        round: msg.round,
                        sender: *id,
                        payload: Payload::ParticipantUpdate {
                            weights: encrypt_values(&self.pk, w, &self.codec, &mut rng).unwrap(),
                            blinded_score: s * l,
                        },
                    }
                    .encode(),
                )
            })
            .collect()
    }
}

pub fn injected_round(
    schedule: ThresholdSchedule,
    aggregation: Aggregation,
    replies: Vec<(u32, Option<f64>, Vec<f64>)>,
    initiator_weights: &[f64],
) -> (Vec<f64>, Vec<(u32, ScoreStatus)>) {
    let cfg = super::quick_config(1);
    let sk = run_keys(&cfg).unwrap();
    let pk = sk.public_key();
    let codec = FixedPointCodec::for_key(&pk, cfg.scale_bits).unwrap();
    let dim = initiator_weights.len();
    let mut server = ServerState::new(pk.clone(), dim, schedule, 20, aggregation, 5).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let init = RoundMessage {
        round: 0,
        sender: INITIATOR_ID,
        payload: Payload::InitParams {
            weights: encrypt_values(&pk, &vec![0.0; dim], &codec, &mut rng).unwrap(),
        },
    }
    .encode();
    server.accept_init(&init).unwrap();
    let mut unit = vec![0.0; dim];
    unit[0] = 1.0;
    let up = RoundMessage {
        round: 1,
        sender: INITIATOR_ID,
        payload: Payload::InitiatorUpdate {
            weights: encrypt_values(&pk, initiator_weights, &codec, &mut rng).unwrap(),
            component: encrypt_values(&pk, &unit, &codec, &mut rng).unwrap(),
        },
    }
    .encode();
    let mut link = InjectedLink {
        sk: sk.clone(),
        pk: pk.clone(),
        codec: codec.clone(),
        replies,
    };
    let (global, outcome) = server.server_round(&up, &mut link).unwrap();
    let Payload::GlobalParams {
        weights,
        included_count,
        aggregation,
    } = RoundMessage::decode(&global).unwrap().payload
    else {
        panic!("expected global parameters");
    };
    assert_eq!(included_count, outcome.included_count);
    let decoded = decode_global(&sk, &codec, &weights, included_count, aggregation).unwrap();
    (
        decoded,
        outcome
            .scores
            .iter()
            .map(|s| (s.party_id, s.status))
            .collect(),
    )
}
