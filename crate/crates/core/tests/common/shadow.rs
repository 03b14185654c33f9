//! Plaintext replica of the protocol. Parties train with the same seeds,
//! scores are plain cosines, and aggregation runs on the same fixed-point
//! integers the encrypted pipeline sums, so every decision can be compared.

use ppml_core::data::ShardMap;
use ppml_core::ml::{train_local, ModelParams, ModelSpec, TrainConfig};
use ppml_core::protocol::{
    derive_seed, passes_threshold, PartySeeds, ThresholdSchedule, INITIATOR_ID,
};
use ppml_core::similarity::plaintext_cosine;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub struct ShadowRound {
    pub round: u32,
    /// (participant id, cosine, included)
    pub scores: Vec<(u32, f64, bool)>,
    pub global: Vec<f64>,
}

pub struct Shadow {
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub scale_bits: u32,
    pub schedule: ThresholdSchedule,
    pub init_seed: u64,
    pub crypto_seed: u64,
}

fn quantize(x: f64, scale_bits: u32) -> i128 {
    (x * f64::from(scale_bits).exp2()).round() as i128
}

fn dequantize_mean(sum: i128, count: u32, scale_bits: u32) -> f64 {
    let m = sum.unsigned_abs() as f64 / f64::from(scale_bits).exp2();
    let v = if sum < 0 { -m } else { m };
    v / f64::from(count)
}

impl Shadow {
    pub fn initial_global(&self) -> Vec<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(self.init_seed, 0));
        let w = ModelParams::init(&self.spec, &mut rng);
        w.as_slice()
            .iter()
            .map(|&x| dequantize_mean(quantize(x, self.scale_bits), 1, self.scale_bits))
            .collect()
    }

    pub fn run(&self, shards: &ShardMap, rounds: u32) -> Vec<ShadowRound> {
        let mut rngs: Vec<(u32, ChaCha20Rng)> = shards
            .parties
            .iter()
            .map(|p| {
                let seeds = PartySeeds::derive(self.init_seed, self.crypto_seed, p.id);
                (p.id, ChaCha20Rng::seed_from_u64(seeds.train))
            })
            .collect();
        let mut global = self.initial_global();
        let mut out = Vec::new();
        for round in 1..=rounds {
            let start = ModelParams::from_flat(&self.spec, global.clone()).unwrap();
            let mut trained = Vec::new();
            for (p, (id, rng)) in shards.parties.iter().zip(rngs.iter_mut()) {
                assert_eq!(p.id, *id);
                let w = train_local(&self.spec, &start, &p.train, &self.train, rng).unwrap();
                trained.push((p.id, w));
            }
            let w_o = &trained
                .iter()
                .find(|(id, _)| *id == INITIATOR_ID)
                .unwrap()
                .1;
            let threshold = self.schedule.threshold(round);
            let mut sum: Vec<i128> = w_o
                .as_slice()
                .iter()
                .map(|&x| quantize(x, self.scale_bits))
                .collect();
            let mut count = 1u32;
            let mut scores = Vec::new();
            for (id, w) in trained.iter().filter(|(id, _)| *id != INITIATOR_ID) {
                let s = plaintext_cosine(w_o.as_slice(), w.as_slice())
                    .unwrap()
                    .value();
                let keep = passes_threshold(s, threshold);
                if keep {
                    for (acc, &x) in sum.iter_mut().zip(w.as_slice()) {
                        *acc += quantize(x, self.scale_bits);
                    }
                    count += 1;
                }
                scores.push((*id, s, keep));
            }
            global = sum
                .iter()
                .map(|&s| dequantize_mean(s, count, self.scale_bits))
                .collect();
            out.push(ShadowRound {
                round,
                scores,
                global: global.clone(),
            });
        }
        out
    }
}
